//! Self-describing checkpoint container (JSON).
//!
//! Holds the training config, parameters by name, optimizer moments, the
//! schedule descriptor and the trainer's RNG state. The `format`/`version`
//! pair is checked on load and anything else is rejected.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::PriorNetwork;
use crate::optim::Adam;
use crate::schedule::ScheduleSpec;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "clfusion-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub step: usize,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<Adam>,
    pub rng: Option<ChaCha8Rng>,
}

pub struct CheckpointParts {
    pub config: TrainConfig,
    pub net: PriorNetwork,
    pub step: usize,
    pub optimizer: Option<Adam>,
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        net: &PriorNetwork,
        step: usize,
        optimizer: Option<&Adam>,
        rng: Option<&ChaCha8Rng>,
    ) -> Self {
        let params = net
            .layout()
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: net.params()[e.range()].to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            schedule: config.schedule,
            step,
            params,
            optimizer: optimizer.cloned(),
            rng: rng.cloned(),
        }
    }

    fn check_format(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "not a checkpoint: format tag `{}` (expected `{CHECKPOINT_FORMAT}`)",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.schedule != self.config.schedule {
            return Err(Error::Format("schedule descriptor disagrees with the stored config".into()));
        }
        Ok(())
    }

    /// Rebuilds the network by matching stored tensors to the layout by name.
    pub fn network(&self) -> Result<PriorNetwork> {
        self.check_format()?;
        let layout = crate::network::ParamLayout::new(&self.config.prior)?;
        let mut flat = vec![0.0; layout.total()];
        if self.params.len() != layout.entries().len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config implies {}",
                self.params.len(),
                layout.entries().len()
            )));
        }
        for t in &self.params {
            let entry = layout
                .entry(&t.name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{}`", t.name)))?;
            if entry.shape != t.shape || t.values.len() != entry.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    t.name, t.shape, entry.shape
                )));
            }
            flat[entry.range()].copy_from_slice(&t.values);
        }
        PriorNetwork::from_params(self.config.prior.clone(), flat)
    }

    pub fn into_parts(self) -> Result<CheckpointParts> {
        let net = self.network()?;
        Ok(CheckpointParts {
            config: self.config,
            net,
            step: self.step,
            optimizer: self.optimizer,
            rng: self.rng,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Peek at the tag first so foreign or outdated files fail with a
        // format error rather than a field-level parse error.
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or("<missing>");
        let version = raw.get("version").and_then(|v| v.as_u64());
        if format != CHECKPOINT_FORMAT || version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Format(format!(
                "unsupported checkpoint (format `{format}`, version {version:?}); expected `{CHECKPOINT_FORMAT}` v{CHECKPOINT_VERSION}"
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(raw)?;
        ckpt.check_format()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Trainer;

    fn trainer() -> Trainer {
        let mut cfg = TrainConfig::desk();
        cfg.prior.width = 8;
        cfg.prior.heads = 2;
        cfg.prior.depth = 1;
        Trainer::new(cfg).unwrap()
    }

    #[test]
    fn parameters_round_trip_bit_exactly() {
        let tr = trainer();
        let json = tr.checkpoint().to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        let net = back.network().unwrap();
        let a: Vec<u64> = tr.network().params().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = net.params().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back, tr.checkpoint());
    }

    #[test]
    fn foreign_versions_are_rejected() {
        let tr = trainer();
        let mut v: serde_json::Value = serde_json::from_str(&tr.checkpoint().to_json().unwrap()).unwrap();
        v["version"] = 0.into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Format(_))));
        v["version"] = CHECKPOINT_VERSION.into();
        v["format"] = "something-else".into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_shape_mismatch_is_rejected() {
        let tr = trainer();
        let mut ck = tr.checkpoint();
        ck.params[0].values.pop();
        assert!(matches!(ck.network(), Err(Error::Format(_))));
    }
}
