//! Sampled-latent file.
//!
//! ```text
//! magic     4 bytes  "CLFL"
//! version   u32
//! dim       u32
//! count     u32
//! seed      u64
//! guidance  f64
//! meta_len  u32
//! meta      meta_len bytes of UTF-8 JSON (effective config, inputs)
//! values    count * dim f32, little-endian
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const LATENTS_MAGIC: &[u8; 4] = b"CLFL";
pub const LATENTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFile {
    pub dim: usize,
    pub seed: u64,
    pub guidance_scale: f64,
    pub meta: serde_json::Value,
    pub latents: Vec<Vec<f64>>,
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

impl LatentFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::with_capacity(36 + meta.len() + 4 * self.dim * self.latents.len());
        buf.extend_from_slice(LATENTS_MAGIC);
        buf.extend_from_slice(&LATENTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.dim, "dim")?);
        buf.extend_from_slice(&u32_of(self.latents.len(), "count")?);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.guidance_scale.to_le_bytes());
        buf.extend_from_slice(&u32_of(meta.len(), "meta length")?);
        buf.extend_from_slice(&meta);
        for w in &self.latents {
            if w.len() != self.dim {
                return Err(Error::Format(format!("latent has {} values, header says {}", w.len(), self.dim)));
            }
            for &x in w {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let out = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format(format!("truncated latent file at byte {pos}")))?;
            pos += n;
            Ok(out)
        };
        if take(4)? != LATENTS_MAGIC {
            return Err(Error::Format("not a latent file (bad magic)".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = u32_at(take(4)?);
        if version != LATENTS_VERSION as usize {
            return Err(Error::Format(format!("latent file version {version} unsupported")));
        }
        let dim = u32_at(take(4)?);
        let count = u32_at(take(4)?);
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let guidance_scale = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let meta_len = u32_at(take(4)?);
        let meta = serde_json::from_slice(take(meta_len)?)?;
        let values = take(4 * dim * count)?;
        let latents = values
            .chunks_exact(4 * dim.max(1))
            .take(count)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect()
            })
            .collect();
        Ok(Self {
            dim,
            seed,
            guidance_scale,
            meta,
            latents,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
