//! Trains the desk-scale prior on a freshly generated synthetic world and
//! prints the loss every 200 steps.
//!
//! ```bash
//! cargo run --release -p clfusion --example train_desk
//! ```

use clfusion::data::{generate_dataset, SyntheticWorld, WorldConfig};
use clfusion::trainer::{TrainConfig, Trainer};

fn main() -> clfusion::Result<()> {
    let world = SyntheticWorld::new(WorldConfig::default())?;
    let dataset = generate_dataset(&world, 64, 4, 0, serde_json::Value::Null)?;
    let mut trainer = Trainer::new(TrainConfig::desk())?;
    let started = std::time::Instant::now();
    trainer.run(&dataset, |_, rec| {
        if rec.step % 200 == 0 {
            let r = rec.report;
            println!(
                "step {:5}  total {:.4}  diff {:.4}  l2 {:.4}  tri {:.4}",
                rec.step, r.l_total, r.l_diff, r.l_2, r.l_tri
            );
        }
        Ok(())
    })?;
    println!("trained {} steps in {:.1}s", trainer.step_index(), started.elapsed().as_secs_f64());
    Ok(())
}
