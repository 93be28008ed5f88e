//! Trains the full and no-contrast models on one seed and reports held-out
//! view invariance, recovery and the inter-identity baseline for each.
//!
//! ```bash
//! cargo run --release -p clfusion --example recovery_eval
//! ```

use clfusion::data::{generate_dataset, SyntheticWorld, WorldConfig};
use clfusion::eval::{inter_identity_baseline, score_model, EvalConfig, Variant};
use clfusion::trainer::{TrainConfig, Trainer};

fn main() -> clfusion::Result<()> {
    let world = SyntheticWorld::new(WorldConfig::default())?;
    let train = generate_dataset(&world, 64, 4, 0, serde_json::Value::Null)?;
    let heldout = generate_dataset(&world, 32, 4, 1, serde_json::Value::Null)?;
    let eval = EvalConfig::default();

    for variant in [Variant::Full, Variant::NoContrast] {
        let mut trainer = Trainer::new(variant.apply(&TrainConfig::desk()))?;
        trainer.run(&train, |_, _| Ok(()))?;
        let (net, sched) = (trainer.network(), trainer.schedule());
        let s = score_model(net, &heldout, sched, &eval)?;
        let base = inter_identity_baseline(net, &heldout, sched, eval.n_probes, eval.seed)?;
        println!(
            "{:<11} invariance {:.4} (inter-identity {:.4})  recovery cos {:.4}  l2 {:.4}",
            variant.name(),
            s.view_invariance,
            base,
            s.recovery.cosine_mean,
            s.recovery.l2_mean
        );
    }
    Ok(())
}
