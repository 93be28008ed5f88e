//! Run configuration for the command line: one document holding the world,
//! dataset, training, evaluation and ablation settings.
//!
//! Values are resolved as built-in preset, then a config file (TOML, or JSON
//! for `.json` paths), then `key=value` overrides. Keys are dotted paths
//! such as `train.prior.depth`; a bare leaf name like `iterations` is
//! accepted when it is unambiguous.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::WorldConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Variant};
use crate::network::PriorConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config {
                key: "preset".into(),
                reason: format!("unknown preset `{s}` (expected desk or full)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_identities: usize,
    pub views: usize,
    pub seed: u64,
    pub heldout_identities: usize,
    pub heldout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_identities: 64,
            views: 4,
            seed: 0,
            heldout_identities: 32,
            heldout_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            world: WorldConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Full-size dimensions and hyperparameters. Never picked implicitly.
    pub fn full() -> Self {
        let prior = PriorConfig::full();
        Self {
            preset: Preset::Full,
            world: WorldConfig {
                latent_dim: prior.latent_dim,
                embed_dim: prior.embed_dim,
                ..WorldConfig::default()
            },
            data: DataConfig {
                n_identities: 10_000,
                views: 8,
                heldout_identities: 256,
                ..DataConfig::default()
            },
            train: TrainConfig::full(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        self.train.validate().map_err(|e| match e {
            Error::Param { field, reason } => cfg_err(&format!("train.{field}"), reason),
            other => other,
        })?;
        self.eval.sampler.validate().map_err(|e| match e {
            Error::Param { field, reason } => cfg_err(&format!("eval.sampler.{field}"), reason),
            other => other,
        })?;
        if self.world.latent_dim != self.train.prior.io_dim() {
            return Err(cfg_err(
                "train.prior.latent_dim",
                format!(
                    "network predicts {} values but the world's latents have {}",
                    self.train.prior.io_dim(),
                    self.world.latent_dim
                ),
            ));
        }
        if self.world.embed_dim != self.train.prior.embed_dim {
            return Err(cfg_err(
                "train.prior.embed_dim",
                format!(
                    "network takes {}-dim embeddings but the world produces {}",
                    self.train.prior.embed_dim, self.world.embed_dim
                ),
            ));
        }
        if self.data.n_identities < 1 {
            return Err(cfg_err("data.n_identities", "must be >= 1".into()));
        }
        if self.data.views < self.train.views {
            return Err(cfg_err(
                "data.views",
                format!("dataset stores {} views, training draws {}", self.data.views, self.train.views),
            ));
        }
        if self.eval.n_probes < 1 {
            return Err(cfg_err("eval.n_probes", "must be >= 1".into()));
        }
        Ok(())
    }

    /// Preset, then `file`, then `overrides`, then validation. A `preset`
    /// argument wins over a `preset` key in the file.
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_value = file.map(read_document).transpose()?;
        let preset = match preset {
            Some(p) => p,
            None => match file_value.as_ref().and_then(|v| v.get("preset")) {
                Some(Value::String(s)) => s.parse()?,
                Some(other) => {
                    return Err(Error::Config {
                        key: "preset".into(),
                        reason: format!("expected a string, got {other}"),
                    })
                }
                None => Preset::Desk,
            },
        };
        let mut doc = serde_json::to_value(Self::preset(preset))?;
        if let Some(v) = file_value {
            merge(&mut doc, v, "")?;
        }
        doc["preset"] = serde_json::to_value(preset)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config {
            key: "<document>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config {
            key: "<document>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str::<toml::Table>(&text)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::to_value(t).map_err(|e| e.to_string()))
    };
    let value = parsed.map_err(|reason| Error::Config {
        key: path.display().to_string(),
        reason,
    })?;
    if !value.is_object() {
        return Err(Error::Config {
            key: path.display().to_string(),
            reason: "config file must hold a table of keys".into(),
        });
    }
    Ok(value)
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "table",
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Writes `src` into `dst`, rejecting keys that `dst` does not have and
/// values whose type differs from the default's. Null defaults (optional
/// settings) accept anything.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = join(path, &k);
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => {
                        return Err(Error::Config {
                            key,
                            reason: "unknown key".into(),
                        })
                    }
                }
            }
            Ok(())
        }
        (slot @ Value::Null, v) => {
            *slot = v;
            Ok(())
        }
        (slot, v @ Value::Null) => {
            *slot = v;
            Ok(())
        }
        (slot, v) if kind(slot) == kind(&v) => {
            *slot = v;
            Ok(())
        }
        (slot, v) => Err(Error::Config {
            key: path.to_string(),
            reason: format!("expected a {}, got a {} ({v})", kind(slot), kind(&v)),
        }),
    }
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(m) = v {
        for (k, child) in m {
            let p = join(prefix, k);
            if child.is_object() {
                leaf_paths(child, &p, out);
            } else {
                out.push(p);
            }
        }
    }
}

fn lookup<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(doc, |v, k| v.get(k))
}

/// Finds the full dotted path for `key`, accepting an unambiguous suffix.
fn resolve_key(doc: &Value, key: &str) -> Result<String> {
    if lookup(doc, key).is_some() {
        return Ok(key.to_string());
    }
    let mut leaves = Vec::new();
    leaf_paths(doc, "", &mut leaves);
    let suffix = format!(".{key}");
    let hits: Vec<String> = leaves.into_iter().filter(|p| p.ends_with(&suffix)).collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().unwrap()),
        0 => Err(Error::Config {
            key: key.into(),
            reason: "unknown key".into(),
        }),
        _ => Err(Error::Config {
            key: key.into(),
            reason: format!("ambiguous; use one of {}", hits.join(", ")),
        }),
    }
}

/// Parses an override value as a TOML value (numbers, booleans, arrays,
/// quoted strings); anything else is taken as a bare string.
fn parse_value(raw: &str) -> Value {
    if raw == "none" || raw == "null" {
        return Value::Null;
    }
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.into(),
        reason: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let path = resolve_key(doc, key)?;
    let mut value = parse_value(raw.trim());
    // Integers are accepted where the default is a float.
    let current = lookup(doc, &path).cloned().unwrap_or(Value::Null);
    if let (Value::Number(cur), Value::Number(n)) = (&current, &value) {
        if cur.is_f64() && !n.is_f64() {
            value = serde_json::json!(n.as_f64());
        }
    }
    // Rebuild the single-key patch and merge it so type checks apply.
    let patch = path.rsplit('.').fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.to_string(), acc);
        Value::Object(m)
    });
    merge(doc, patch, "")
}
