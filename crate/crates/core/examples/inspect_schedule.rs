//! Prints a few rows of the linear and cosine noise schedules.
//!
//! ```bash
//! cargo run -p clfusion --example inspect_schedule
//! ```

use clfusion::schedule::{NoiseSchedule, ScheduleKind};

fn main() -> clfusion::Result<()> {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = NoiseSchedule::new(kind, 1000, 1e-4, 0.02)?;
        println!("{kind:?}");
        println!("{:>6} {:>12} {:>12} {:>12}", "t", "beta", "alpha_bar", "post_var");
        for t in [1, 10, 100, 250, 500, 750, 1000] {
            println!(
                "{t:>6} {:>12.4e} {:>12.6} {:>12.4e}",
                s.beta(t),
                s.alpha_bar(t),
                s.posterior_var(t)
            );
        }
        println!();
    }
    Ok(())
}
