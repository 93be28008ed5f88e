//! Training data: backends that turn latents into conditioning embeddings,
//! the on-disk dataset format, pseudo-text augmentation and batch assembly.

mod batch;
mod dataset;
mod world;

pub use batch::{make_batch, BatchGroup, TrainingBatch};
pub use dataset::{generate_dataset, Dataset, DatasetHeader, IdentitySample, View, DATASET_MAGIC, DATASET_VERSION};
pub use world::{SyntheticWorld, WorldConfig};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    ImageView,
    PseudoText,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondEmbedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl CondEmbedding {
    pub fn new(values: Vec<f64>, source: EmbeddingSource) -> Self {
        Self { values, source }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Camera pose in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraPose {
    pub const FRONTAL: CameraPose = CameraPose { yaw: 0.0, pitch: 0.0 };

    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }
}

/// Inclusive pose bounds declared by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
}

impl PoseRange {
    /// Face generators: yaw in [-45, 45] degrees, frontal pitch.
    pub const FACES: PoseRange = PoseRange {
        yaw: (-45.0, 45.0),
        pitch: (0.0, 0.0),
    };

    pub fn contains(&self, pose: CameraPose) -> bool {
        (self.yaw.0..=self.yaw.1).contains(&pose.yaw) && (self.pitch.0..=self.pitch.1).contains(&pose.pitch)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraPose {
        let pick = |(lo, hi): (f64, f64), rng: &mut R| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let yaw = pick(self.yaw, rng);
        let pitch = pick(self.pitch, rng);
        CameraPose { yaw, pitch }
    }
}

/// Rendered output of a generator. Real backends fill RGB pixels; the
/// synthetic world emits a one-row feature strip.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

/// Adapter over a latent-conditioned generator and an image/text encoder.
///
/// `render` must be deterministic for a fixed `(w, pose)` and encoding the
/// same image twice must give the same embedding.
pub trait Backend {
    fn descriptor(&self) -> String;
    fn latent_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn pose_range(&self) -> PoseRange;
    /// Whether embeddings come out unit-normalized.
    fn normalizes(&self) -> bool;
    fn render(&self, w: &[f64], pose: CameraPose) -> Result<Image>;
    fn encode_image(&self, image: &Image) -> Result<CondEmbedding>;
    fn embed_text(&self, prompt: &str) -> Result<CondEmbedding>;

    fn embed_view(&self, w: &[f64], pose: CameraPose) -> Result<CondEmbedding> {
        self.encode_image(&self.render(w, pose)?)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::contract("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Perturbs an image embedding on the unit sphere to stand in for a text
/// embedding: `normalize(e + xi |e| eta / |eta|)` with Gaussian `eta`.
pub fn pseudo_text_augment<R: Rng + ?Sized>(e: &CondEmbedding, xi: f64, rng: &mut R) -> Result<CondEmbedding> {
    if !(xi >= 0.0) {
        return Err(Error::param("xi", "must be >= 0"));
    }
    let e_norm = e.norm();
    if !(e_norm > 0.0) {
        return Err(Error::contract("pseudo-text augmentation of a zero-norm embedding"));
    }
    let eta: Vec<f64> = (0..e.dim()).map(|_| StandardNormal.sample(rng)).collect();
    let eta_norm = norm(&eta);
    let mut out: Vec<f64> = e
        .values
        .iter()
        .zip(&eta)
        .map(|(x, n)| x + xi * e_norm * n / eta_norm)
        .collect();
    normalize(&mut out)?;
    Ok(CondEmbedding::new(out, EmbeddingSource::PseudoText))
}
