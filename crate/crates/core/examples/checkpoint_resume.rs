//! Stops a run halfway, saves a checkpoint, resumes from the file and checks
//! that the result matches an uninterrupted run bit for bit.
//!
//! ```bash
//! cargo run --release -p clfusion --example checkpoint_resume
//! ```

use clfusion::checkpoint::Checkpoint;
use clfusion::data::{generate_dataset, SyntheticWorld, WorldConfig};
use clfusion::trainer::{TrainConfig, Trainer};

fn main() -> clfusion::Result<()> {
    let world = SyntheticWorld::new(WorldConfig::default())?;
    let ds = generate_dataset(&world, 32, 4, 0, serde_json::Value::Null)?;
    let cfg = TrainConfig {
        iterations: 200,
        ..TrainConfig::desk()
    };

    let mut straight = Trainer::new(cfg.clone())?;
    let full = straight.run(&ds, |_, _| Ok(()))?;

    let path = std::env::temp_dir().join("clfusion_example_checkpoint.json");
    let mut first = Trainer::new(TrainConfig { iterations: 100, ..cfg })?;
    let mut losses = first.run(&ds, |_, _| Ok(()))?;
    first.checkpoint().save(&path)?;
    println!("saved step {} to {}", first.step_index(), path.display());

    let mut second = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
    second.set_iterations(200);
    losses.extend(second.run(&ds, |_, _| Ok(()))?);
    std::fs::remove_file(&path)?;

    let same_losses = full.iter().zip(&losses).all(|(a, b)| a.l_total.to_bits() == b.l_total.to_bits());
    let same_params = straight.network().params() == second.network().params();
    println!("final loss {:.6}", losses.last().map_or(f64::NAN, |r| r.l_total));
    println!("loss trajectory identical: {same_losses}, parameters identical: {same_params}");
    Ok(())
}
