//! Dataset container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "CLFD"
//! version    u32
//! header_len u32      total header bytes, multiple of 16
//! latent_dim u32
//! embed_dim  u32
//! k          u32      views per identity
//! n          u32      identities
//! pose_dim   u32      always 2 (yaw, pitch in degrees)
//! flags      u32      bit 0: embeddings are unit-normalized
//! seed       u64
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (backend descriptor, effective config)
//! padding    zeros up to header_len
//! records    n * stride bytes of f32: w0[latent_dim], then k * (yaw, pitch, e[embed_dim])
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Backend, CameraPose, CondEmbedding, EmbeddingSource};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CLFD";
pub const DATASET_VERSION: u32 = 1;
const POSE_DIM: usize = 2;
const FIXED_HEADER: usize = 4 + 4 * 8 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub pose: CameraPose,
    pub embedding: CondEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySample {
    pub identity_id: usize,
    pub w0: Vec<f64>,
    pub views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub views_per_identity: usize,
    pub normalized: bool,
    pub seed: u64,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub identities: Vec<IdentitySample>,
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Samples `n_identities` latents from the standard Gaussian and renders `k`
/// views each at poses drawn uniformly from the backend's range.
///
/// Identity `i` draws from ChaCha stream `i` of `seed`, so output does not
/// depend on generation order. Values are rounded to `f32` so the in-memory
/// dataset equals what [`Dataset::write`] stores.
pub fn generate_dataset<B: Backend + ?Sized>(
    backend: &B,
    n_identities: usize,
    k: usize,
    seed: u64,
    meta: serde_json::Value,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::param("k", "need at least 2 views per identity"));
    }
    if n_identities < 1 {
        return Err(Error::param("n_identities", "must be >= 1"));
    }
    let range = backend.pose_range();
    let mut identities = Vec::with_capacity(n_identities);
    for id in 0..n_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let w0: Vec<f64> = (0..backend.latent_dim())
            .map(|_| f32_round(StandardNormal.sample(&mut rng)))
            .collect();
        let mut views = Vec::with_capacity(k);
        for _ in 0..k {
            let pose = range.sample(&mut rng);
            let pose = CameraPose::new(f32_round(pose.yaw), f32_round(pose.pitch));
            let mut embedding = backend.embed_view(&w0, pose).map_err(|e| Error::Backend {
                identity: Some(id),
                message: e.to_string(),
            })?;
            embedding.values.iter_mut().for_each(|v| *v = f32_round(*v));
            views.push(View { pose, embedding });
        }
        identities.push(IdentitySample {
            identity_id: id,
            w0,
            views,
        });
    }
    let meta = serde_json::json!({
        "backend": serde_json::from_str::<serde_json::Value>(&backend.descriptor())
            .unwrap_or_else(|_| serde_json::Value::String(backend.descriptor())),
        "config": meta,
    });
    Ok(Dataset {
        header: DatasetHeader {
            latent_dim: backend.latent_dim(),
            embed_dim: backend.embed_dim(),
            views_per_identity: k,
            normalized: backend.normalizes(),
            seed,
            meta,
        },
        identities,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated dataset: need {end} bytes, have {}",
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn record_stride(&self) -> usize {
        4 * (self.header.latent_dim + self.header.views_per_identity * (POSE_DIM + self.header.embed_dim))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let meta = serde_json::to_vec(&h.meta)?;
        let header_len = (FIXED_HEADER + meta.len()).div_ceil(16) * 16;
        let mut buf = Vec::with_capacity(header_len + self.len() * self.record_stride());
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        put_u32(&mut buf, header_len)?;
        put_u32(&mut buf, h.latent_dim)?;
        put_u32(&mut buf, h.embed_dim)?;
        put_u32(&mut buf, h.views_per_identity)?;
        put_u32(&mut buf, self.len())?;
        put_u32(&mut buf, POSE_DIM)?;
        put_u32(&mut buf, usize::from(h.normalized))?;
        buf.extend_from_slice(&h.seed.to_le_bytes());
        put_u32(&mut buf, meta.len())?;
        buf.extend_from_slice(&meta);
        buf.resize(header_len, 0);

        let put = |buf: &mut Vec<u8>, x: f64| buf.extend_from_slice(&(x as f32).to_le_bytes());
        for (idx, ident) in self.identities.iter().enumerate() {
            if ident.w0.len() != h.latent_dim || ident.views.len() != h.views_per_identity {
                return Err(Error::Format(format!("identity {idx} does not match the header shape")));
            }
            ident.w0.iter().for_each(|&x| put(&mut buf, x));
            for view in &ident.views {
                if view.embedding.dim() != h.embed_dim {
                    return Err(Error::Format(format!("identity {idx} has a malformed embedding")));
                }
                put(&mut buf, view.pose.yaw);
                put(&mut buf, view.pose.pitch);
                view.embedding.values.iter().for_each(|&x| put(&mut buf, x));
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != DATASET_VERSION as usize {
            return Err(Error::Format(format!(
                "dataset format version {version} unsupported (expected {DATASET_VERSION})"
            )));
        }
        let header_len = cur.u32()?;
        let latent_dim = cur.u32()?;
        let embed_dim = cur.u32()?;
        let k = cur.u32()?;
        let n = cur.u32()?;
        let pose_dim = cur.u32()?;
        if pose_dim != POSE_DIM {
            return Err(Error::Format(format!("pose dim {pose_dim} unsupported")));
        }
        let flags = cur.u32()?;
        let seed = cur.u64()?;
        let meta_len = cur.u32()?;
        let meta: serde_json::Value = serde_json::from_slice(cur.take(meta_len)?)?;
        if cur.pos > header_len {
            return Err(Error::Format("header length field is too small".into()));
        }
        cur.pos = header_len;

        let mut identities = Vec::with_capacity(n);
        for identity_id in 0..n {
            let w0 = (0..latent_dim).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
            let mut views = Vec::with_capacity(k);
            for _ in 0..k {
                let pose = CameraPose::new(cur.f32()?, cur.f32()?);
                let values = (0..embed_dim).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
                views.push(View {
                    pose,
                    embedding: CondEmbedding::new(values, EmbeddingSource::ImageView),
                });
            }
            identities.push(IdentitySample {
                identity_id,
                w0,
                views,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last record",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self {
            header: DatasetHeader {
                latent_dim,
                embed_dim,
                views_per_identity: k,
                normalized: flags & 1 == 1,
                seed,
                meta,
            },
            identities,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
