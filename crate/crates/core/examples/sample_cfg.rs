//! Trains a short run, then samples latents for held-out identities at several
//! guidance scales and compares them with the ground truth.
//!
//! ```bash
//! cargo run --release -p clfusion --example sample_cfg -- 1000
//! ```
//! Argument: training steps (default 1000).

use clfusion::data::{generate_dataset, SyntheticWorld, WorldConfig};
use clfusion::eval::cosine;
use clfusion::sampler::{sample_batch, SamplerConfig};
use clfusion::trainer::{TrainConfig, Trainer};

fn main() -> clfusion::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().expect("step count")).unwrap_or(1000);
    let world = SyntheticWorld::new(WorldConfig::default())?;
    let train = generate_dataset(&world, 64, 4, 0, serde_json::Value::Null)?;
    let heldout = generate_dataset(&world, 8, 4, 1, serde_json::Value::Null)?;

    let mut trainer = Trainer::new(TrainConfig {
        iterations: steps,
        ..TrainConfig::desk()
    })?;
    trainer.run(&train, |_, _| Ok(()))?;

    let embeddings: Vec<Vec<f64>> = heldout.identities.iter().map(|id| id.views[0].embedding.values.clone()).collect();
    for g in [0.0, 1.0, 3.0, 5.0] {
        let cfg = SamplerConfig {
            guidance_scale: g,
            ..SamplerConfig::default()
        };
        let (latents, timing) = sample_batch(trainer.network(), &embeddings, trainer.schedule(), &cfg, 7)?;
        let mean_cos = latents
            .iter()
            .zip(&heldout.identities)
            .map(|(w, id)| cosine(w, &id.w0))
            .sum::<f64>()
            / latents.len() as f64;
        println!(
            "guidance {g}: mean cosine to true latent {mean_cos:+.3}, {:.3} s per sample",
            timing.mean_s()
        );
    }
    Ok(())
}
