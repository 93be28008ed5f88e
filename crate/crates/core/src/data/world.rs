use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{normalize, Backend, CameraPose, CondEmbedding, EmbeddingSource, Image, PoseRange};
use crate::error::{check_len, Error, Result};

const POSE_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Width of the hidden `tanh` layer; 0 picks `2 * latent_dim`.
    pub hidden_dim: usize,
    pub pose_strength: f64,
    pub noise_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 8,
            embed_dim: 16,
            hidden_dim: 0,
            pose_strength: 1.0,
            noise_scale: 0.05,
        }
    }
}

/// Seeded stand-in for "render then encode":
/// `g(w, p) = normalize(A tanh(B w) + s C phi(p) + noise(w, p))`.
///
/// The view noise is keyed on the exact bits of `(seed, w, p)`, so `g` is a
/// deterministic function even with a non-zero noise scale.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: WorldConfig,
    hidden: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let std = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Trigonometric pose features on angles in radians.
pub(crate) fn pose_features(pose: CameraPose) -> [f64; POSE_FEATURES] {
    let yaw = pose.yaw.to_radians();
    let pitch = pose.pitch.to_radians();
    [
        yaw.sin(),
        yaw.cos(),
        (2.0 * yaw).sin(),
        (2.0 * yaw).cos(),
        pitch.sin(),
        pitch.cos(),
    ]
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.latent_dim < 2 {
            return Err(Error::param("latent_dim", "synthetic world needs >= 2 dims"));
        }
        if config.embed_dim < 2 {
            return Err(Error::param("embed_dim", "synthetic world needs >= 2 dims"));
        }
        if !(config.noise_scale >= 0.0) {
            return Err(Error::param("noise_scale", "must be >= 0"));
        }
        let hidden = if config.hidden_dim == 0 {
            2 * config.latent_dim
        } else {
            config.hidden_dim
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let b = gaussian_matrix(&mut rng, hidden, config.latent_dim);
        let a = gaussian_matrix(&mut rng, config.embed_dim, hidden);
        let c = gaussian_matrix(&mut rng, config.embed_dim, POSE_FEATURES);
        Ok(Self {
            config,
            hidden,
            a,
            b,
            c,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    fn view_noise(&self, w: &[f64], pose: CameraPose) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        for x in w {
            h.update(x.to_bits().to_le_bytes());
        }
        h.update(pose.yaw.to_bits().to_le_bytes());
        h.update(pose.pitch.to_bits().to_le_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.config.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    /// Un-normalized feature vector for `(w, pose)`.
    pub fn features(&self, w: &[f64], pose: CameraPose) -> Result<Vec<f64>> {
        check_len("synthetic world latent", self.config.latent_dim, w.len())?;
        let hidden: Vec<f64> = matvec(&self.b, self.config.latent_dim, w)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let mut out = matvec(&self.a, self.hidden, &hidden);
        let pose_term = matvec(&self.c, POSE_FEATURES, &pose_features(pose));
        for (o, p) in out.iter_mut().zip(pose_term) {
            *o += self.config.pose_strength * p;
        }
        if self.config.noise_scale > 0.0 {
            for (o, n) in out.iter_mut().zip(self.view_noise(w, pose)) {
                *o += self.config.noise_scale * n;
            }
        }
        Ok(out)
    }
}

impl Backend for SyntheticWorld {
    fn descriptor(&self) -> String {
        serde_json::json!({ "backend": "synthetic", "world": self.config }).to_string()
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn pose_range(&self) -> PoseRange {
        PoseRange::FACES
    }

    fn normalizes(&self) -> bool {
        true
    }

    fn render(&self, w: &[f64], pose: CameraPose) -> Result<Image> {
        let pixels = self.features(w, pose)?;
        Ok(Image {
            width: pixels.len(),
            height: 1,
            channels: 1,
            pixels,
        })
    }

    fn encode_image(&self, image: &Image) -> Result<CondEmbedding> {
        check_len("synthetic image", self.config.embed_dim, image.pixels.len())?;
        let mut values = image.pixels.clone();
        normalize(&mut values)?;
        Ok(CondEmbedding::new(values, EmbeddingSource::ImageView))
    }

    fn embed_text(&self, _prompt: &str) -> Result<CondEmbedding> {
        Err(Error::Integration(
            "the synthetic world has no text encoder; pass an embedding file instead".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::norm;
    use rand::Rng;

    fn world(noise: f64) -> SyntheticWorld {
        SyntheticWorld::new(WorldConfig {
            seed: 11,
            noise_scale: noise,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        let (a, b) = (world(0.05), world(0.05));
        let w = [0.3, -1.0, 0.2, 0.0, 1.1, -0.4, 0.9, 0.5];
        let p = CameraPose::new(12.5, 0.0);
        assert_eq!(a.embed_view(&w, p).unwrap(), b.embed_view(&w, p).unwrap());
        assert_eq!(a.embed_view(&w, p).unwrap(), a.embed_view(&w, p).unwrap());
    }

    #[test]
    fn noise_free_is_repeatable_and_unit() {
        let a = world(0.0);
        let w = [0.5; 8];
        let e1 = a.embed_view(&w, CameraPose::new(-30.0, 0.0)).unwrap();
        let e2 = a.embed_view(&w, CameraPose::new(-30.0, 0.0)).unwrap();
        assert_eq!(e1, e2);
        assert!((norm(&e1.values) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn views_are_injective_in_pose() {
        let a = world(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let w: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            let embs: Vec<Vec<f64>> = (0..100)
                .map(|i| {
                    let yaw = -45.0 + 90.0 * i as f64 / 99.0;
                    a.embed_view(&w, CameraPose::new(yaw, 0.0)).unwrap().values
                })
                .collect();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    let d: f64 = embs[i].iter().zip(&embs[j]).map(|(x, y)| (x - y).powi(2)).sum();
                    assert!(d > 1e-14, "poses {i} and {j} collide");
                }
            }
        }
    }

    #[test]
    fn text_is_an_integration_error() {
        assert!(matches!(world(0.0).embed_text("a face"), Err(Error::Integration(_))));
    }
}
