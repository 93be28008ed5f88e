//! Resolves a run configuration from a preset plus `key=value` overrides and
//! prints the effective TOML.
//!
//! ```bash
//! cargo run -p clfusion --example config_overrides -- margin=1.0 train.iterations=500
//! ```

use clfusion::config::{Preset, RunConfig};

fn main() {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    match RunConfig::resolve(Some(Preset::Desk), None, &overrides) {
        Ok(cfg) => print!("{}", cfg.to_toml().expect("config serializes")),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}
