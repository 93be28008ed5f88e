//! Trains the loss ablations on the synthetic world and prints held-out
//! view invariance and recovery for each.
//!
//! ```bash
//! cargo run --release -p clfusion --example ablation -- 3 full,no_contrast,eps_param
//! ```
//! Arguments: number of seeds (default 1), comma-separated variants
//! (default all).

use clfusion::data::{generate_dataset, SyntheticWorld, WorldConfig};
use clfusion::eval::{ablation_suite, EvalConfig, Variant};
use clfusion::trainer::TrainConfig;

fn main() -> clfusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().map(|s| s.parse().expect("seed count")).unwrap_or(1);
    let variants: Vec<Variant> = match args.next() {
        Some(list) => list.split(',').map(str::parse).collect::<clfusion::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };

    let world = SyntheticWorld::new(WorldConfig::default())?;
    let train = generate_dataset(&world, 64, 4, 0, serde_json::Value::Null)?;
    let heldout = generate_dataset(&world, 32, 4, 1, serde_json::Value::Null)?;
    let seeds: Vec<u64> = (0..n_seeds).collect();

    let started = std::time::Instant::now();
    let report = ablation_suite(&TrainConfig::desk(), &variants, &seeds, &train, &heldout, &EvalConfig::default())?;
    for r in &report.results {
        match &r.scores {
            Some(s) => println!(
                "seed {}  {:12}  invariance {:.4}  recovery cos {:.4}  l2 {:.4}",
                r.seed,
                r.variant.name(),
                s.view_invariance,
                s.recovery.cosine_mean,
                s.recovery.l2_mean
            ),
            None => println!("seed {}  {:12}  failed: {}", r.seed, r.variant.name(), r.failure.as_deref().unwrap_or("")),
        }
    }
    println!("report hash {}", report.hash());
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
