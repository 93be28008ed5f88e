//! The learned denoiser.
//!
//! A small pre-norm causal transformer over a four-token sequence
//! `[condition, timestep, noised latent, query]`. The prediction is read from
//! the query position, which attends to everything before it. Depending on
//! [`ParamKind`] the output is the clean latent or the injected noise.
//!
//! Parameters live in one flat `Vec<f64>`; [`ParamLayout`] names the
//! sub-views. Gradients share that layout, so the optimizer and checkpoints
//! only ever see flat vectors.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const SEQ_LEN: usize = 4;
const TOK_COND: usize = 0;
const TOK_TIME: usize = 1;
const TOK_LATENT: usize = 2;
const TOK_QUERY: usize = 3;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// `f_theta`: predict the clean latent `w0`.
    #[default]
    PredictW0,
    /// `eps_theta`: predict the injected noise.
    PredictEps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub param_kind: ParamKind,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub cond_dropout_prob: f64,
    /// Layer count for the extended (per-layer) latent; `None` means a single code.
    pub extended_latent: Option<usize>,
    /// Largest timestep the network accepts.
    pub timesteps: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PriorConfig {
    /// Small enough to train thousands of steps on one CPU core.
    pub fn desk() -> Self {
        Self {
            latent_dim: 8,
            embed_dim: 16,
            param_kind: ParamKind::PredictW0,
            depth: 2,
            width: 32,
            heads: 4,
            ff_mult: 4,
            cond_dropout_prob: 0.1,
            extended_latent: None,
            timesteps: 1000,
        }
    }

    /// 512-dimensional latents and embeddings.
    pub fn full() -> Self {
        Self {
            latent_dim: 512,
            embed_dim: 512,
            depth: 4,
            width: 256,
            ..Self::desk()
        }
    }

    /// Values carried per latent: `layers * latent_dim` in extended mode.
    pub fn io_dim(&self) -> usize {
        self.latent_dim * self.extended_latent.unwrap_or(1)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::param("latent_dim", "must be >= 1"));
        }
        if self.embed_dim < 1 {
            return Err(Error::param("embed_dim", "must be >= 1"));
        }
        if self.depth < 1 {
            return Err(Error::param("depth", "must be >= 1"));
        }
        if self.heads < 1 {
            return Err(Error::param("heads", "must be >= 1"));
        }
        if self.width < 2 || self.width % 2 != 0 {
            return Err(Error::param("width", "must be even and >= 2"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::param(
                "heads",
                format!("width {} not divisible by {} heads", self.width, self.heads),
            ));
        }
        if self.ff_mult < 1 {
            return Err(Error::param("ff_mult", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::param("cond_dropout_prob", "must lie in [0, 1)"));
        }
        if self.extended_latent == Some(0) {
            return Err(Error::param("extended_latent", "layer count must be >= 1"));
        }
        if self.timesteps < 1 {
            return Err(Error::param("timesteps", "must be >= 1"));
        }
        Ok(())
    }
}

/// A named window into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Mat {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Mat {
    fn view<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.offset..self.offset + self.rows * self.cols])
            .expect("layout shape")
    }

    fn view_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut p[self.offset..self.offset + self.rows * self.cols])
            .expect("layout shape")
    }
}

#[derive(Debug, Clone, Copy)]
struct Vect {
    offset: usize,
    len: usize,
}

impl Vect {
    fn view<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.offset..self.offset + self.len])
    }

    fn slice_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: Mat,
    bias: Vect,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: Vect,
    bias: Vect,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    attn_out: Linear,
    ln2: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn,
    Scaled(f64),
    Zeros,
    Ones,
}

/// Flat-parameter layout, a pure function of [`PriorConfig`].
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
    cond_proj: Linear,
    time_proj: Linear,
    latent_proj: Linear,
    query: Vect,
    pos: Mat,
    null_embedding: Vect,
    blocks: Vec<Block>,
    final_ln: Norm,
    head: Linear,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        self.total += shape.iter().product::<usize>();
        self.entries.push(ParamEntry { name, offset, shape });
        self.inits.push(init);
        offset
    }

    fn mat(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Mat {
        let offset = self.push(name, vec![rows, cols], init);
        Mat { offset, rows, cols }
    }

    fn vect(&mut self, name: String, len: usize, init: Init) -> Vect {
        let offset = self.push(name, vec![len], init);
        Vect { offset, len }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, init: Init) -> Linear {
        Linear {
            weight: self.mat(format!("{name}.weight"), out, inp, init),
            bias: self.vect(format!("{name}.bias"), out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, len: usize) -> Norm {
        Norm {
            gain: self.vect(format!("{name}.gain"), len, Init::Ones),
            bias: self.vect(format!("{name}.bias"), len, Init::Zeros),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &PriorConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let ff = cfg.ff_mult * w;
        let io = cfg.io_dim();
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            inits: Vec::new(),
            total: 0,
        };
        let cond_proj = b.linear("cond_proj", w, cfg.embed_dim, Init::FanIn);
        let time_proj = b.linear("time_proj", w, w, Init::FanIn);
        let latent_proj = b.linear("latent_proj", w, io, Init::FanIn);
        let query = b.vect("query".into(), w, Init::Scaled(0.02));
        let pos = b.mat("pos".into(), SEQ_LEN, w, Init::Scaled(0.02));
        let null_embedding = b.vect(
            "null_embedding".into(),
            cfg.embed_dim,
            Init::Scaled(1.0 / (cfg.embed_dim as f64).sqrt()),
        );
        let blocks = (0..cfg.depth)
            .map(|l| Block {
                ln1: b.norm(&format!("blocks.{l}.ln1"), w),
                qkv: b.linear(&format!("blocks.{l}.attn.qkv"), 3 * w, w, Init::FanIn),
                attn_out: b.linear(&format!("blocks.{l}.attn.out"), w, w, Init::FanIn),
                ln2: b.norm(&format!("blocks.{l}.ln2"), w),
                ff_in: b.linear(&format!("blocks.{l}.ff.in"), ff, w, Init::FanIn),
                ff_out: b.linear(&format!("blocks.{l}.ff.out"), w, ff, Init::FanIn),
            })
            .collect();
        let final_ln = b.norm("final_ln", w);
        // Small head: early predictions stay near zero.
        let head = b.linear("head", io, w, Init::Scaled(0.1 / (w as f64).sqrt()));
        Ok(Self {
            entries: b.entries,
            inits: b.inits,
            total: b.total,
            cond_proj,
            time_proj,
            latent_proj,
            query,
            pos,
            null_embedding,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Sinusoidal timestep features: `[sin(t w_0), cos(t w_0), sin(t w_1), ...]`
/// with `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
///
/// Scales of exactly 1 and 0 return the conditional and unconditional
/// predictions unchanged, so the identities hold bit-for-bit.
pub fn apply_cfg(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    check_len("apply_cfg", cond.len(), uncond.len())?;
    if scale == 1.0 {
        return Ok(cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect())
}

/// A batch of denoiser inputs, one row per sequence.
#[derive(Debug, Clone)]
pub struct NetInputs {
    pub latents: Array2<f64>,
    pub timesteps: Vec<usize>,
    pub conds: Array2<f64>,
    pub drop_cond: Vec<bool>,
}

impl NetInputs {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    h1: Array2<f64>,
    ln1: NormCache,
    qkv: Array2<f64>,
    /// Attention probabilities, `[batch * heads, SEQ_LEN, SEQ_LEN]` flattened.
    probs: Vec<f64>,
    attn: Array2<f64>,
    h2: Array2<f64>,
    ln2: NormCache,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Activations kept from a forward pass for [`PriorNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    conds: Array2<f64>,
    time_feats: Array2<f64>,
    latents: Array2<f64>,
    drop_cond: Vec<bool>,
    blocks: Vec<BlockCache>,
    final_ln: NormCache,
    final_h: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PriorNetwork {
    config: PriorConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let th = (C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn layer_norm(x: &Array2<f64>, norm: Norm, p: &[f64]) -> (Array2<f64>, NormCache) {
    let gain = norm.gain.view(p);
    let bias = norm.bias.view(p);
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &gain + &bias;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Array2<f64>, cache: &NormCache, norm: Norm, p: &[f64], grad: &mut [f64]) -> Array2<f64> {
    let gain = norm.gain.view(p);
    {
        let dg = norm.gain.slice_mut(grad);
        for (row_dy, row_xh) in dy.rows().into_iter().zip(cache.xhat.rows()) {
            for ((g, d), x) in dg.iter_mut().zip(row_dy).zip(row_xh) {
                *g += d * x;
            }
        }
    }
    {
        let db = norm.bias.slice_mut(grad);
        for row in dy.rows() {
            for (b, d) in db.iter_mut().zip(row) {
                *b += d;
            }
        }
    }
    let n = dy.ncols() as f64;
    let mut dx = dy * &gain;
    for ((mut row, xh), r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n;
        for (d, x) in row.iter_mut().zip(xh) {
            *d = r * (*d - mean_d - x * mean_dx);
        }
    }
    dx
}

/// `x W^T + b` over rows.
fn linear(x: &ArrayView2<f64>, lin: Linear, p: &[f64]) -> Array2<f64> {
    x.dot(&lin.weight.view(p).t()) + &lin.bias.view(p)
}

/// Accumulates weight/bias gradients of [`linear`] and returns `dL/dx`.
fn linear_backward(x: &ArrayView2<f64>, dy: &ArrayView2<f64>, lin: Linear, p: &[f64], grad: &mut [f64]) -> Array2<f64> {
    linear_param_grads(x, dy, lin, grad);
    dy.dot(&lin.weight.view(p))
}

fn linear_param_grads(x: &ArrayView2<f64>, dy: &ArrayView2<f64>, lin: Linear, grad: &mut [f64]) {
    let mut gw = lin.weight.view_mut(grad);
    general_mat_mul(1.0, &dy.t(), x, 1.0, &mut gw);
    let db = lin.bias.slice_mut(grad);
    for row in dy.rows() {
        for (b, d) in db.iter_mut().zip(row) {
            *b += d;
        }
    }
}

impl PriorNetwork {
    pub fn new<R: Rng + ?Sized>(config: PriorConfig, rng: &mut R) -> Result<Self> {
        let layout = ParamLayout::new(&config)?;
        let mut params = vec![0.0; layout.total()];
        for (entry, init) in layout.entries.iter().zip(&layout.inits) {
            let slot = &mut params[entry.range()];
            match *init {
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
                Init::FanIn => {
                    let fan_in = *entry.shape.last().unwrap_or(&1) as f64;
                    let std = 1.0 / fan_in.sqrt();
                    for v in slot.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = std * z;
                    }
                }
                Init::Scaled(std) => {
                    for v in slot.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = std * z;
                    }
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: PriorConfig, params: Vec<f64>) -> Result<Self> {
        let layout = ParamLayout::new(&config)?;
        check_len("parameter vector", layout.total(), params.len())?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn null_embedding(&self) -> &[f64] {
        &self.params[self.layout.null_embedding.offset..][..self.config.embed_dim]
    }

    /// Projected timestep token (before the positional offset).
    pub fn embed_timestep(&self, t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let feats = Array2::from_shape_vec((1, self.config.width), sinusoidal_features(t as f64, self.config.width))
            .expect("feature shape");
        Ok(linear(&feats.view(), self.layout.time_proj, &self.params).into_raw_vec_and_offset().0)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.timesteps {
            return Err(Error::Timestep {
                t,
                max: self.config.timesteps,
            });
        }
        Ok(())
    }

    /// Single-sequence prediction. With `drop_cond` the embedding is replaced
    /// by the learned null embedding, so `e` has no influence at all.
    pub fn forward(&self, wt: &[f64], t: usize, e: &[f64], drop_cond: bool) -> Result<Vec<f64>> {
        let inputs = NetInputs {
            latents: Array2::from_shape_vec((1, wt.len()), wt.to_vec()).expect("row"),
            timesteps: vec![t],
            conds: Array2::from_shape_vec((1, e.len()), e.to_vec()).expect("row"),
            drop_cond: vec![drop_cond],
        };
        Ok(self.forward_batch(&inputs)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, inputs: &NetInputs) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs)?.0)
    }

    fn validate_inputs(&self, inputs: &NetInputs) -> Result<()> {
        let b = inputs.len();
        check_len("latent width", self.config.io_dim(), inputs.latents.ncols())?;
        check_len("embedding width", self.config.embed_dim, inputs.conds.ncols())?;
        check_len("latent rows", b, inputs.latents.nrows())?;
        check_len("embedding rows", b, inputs.conds.nrows())?;
        check_len("drop flags", b, inputs.drop_cond.len())?;
        for &t in &inputs.timesteps {
            self.check_t(t)?;
        }
        Ok(())
    }

    /// Forward pass that also returns the activations needed for
    /// [`Self::backward`].
    pub fn forward_cached(&self, inputs: &NetInputs) -> Result<(Array2<f64>, ForwardCache)> {
        self.validate_inputs(inputs)?;
        let p = &self.params[..];
        let lay = &self.layout;
        let w = self.config.width;
        let batch = inputs.len();

        let mut conds = inputs.conds.clone();
        let null = lay.null_embedding.view(p);
        for (mut row, &drop) in conds.rows_mut().into_iter().zip(&inputs.drop_cond) {
            if drop {
                row.assign(&null);
            }
        }
        let mut time_feats = Array2::zeros((batch, w));
        for (mut row, &t) in time_feats.rows_mut().into_iter().zip(&inputs.timesteps) {
            row.assign(&Array1::from(sinusoidal_features(t as f64, w)));
        }

        let cond_tok = linear(&conds.view(), lay.cond_proj, p);
        let time_tok = linear(&time_feats.view(), lay.time_proj, p);
        let lat_tok = linear(&inputs.latents.view(), lay.latent_proj, p);
        let query = lay.query.view(p);
        let pos = lay.pos.view(p);

        let mut x = Array2::zeros((batch * SEQ_LEN, w));
        for b in 0..batch {
            let base = b * SEQ_LEN;
            x.row_mut(base + TOK_COND).assign(&(&cond_tok.row(b) + &pos.row(TOK_COND)));
            x.row_mut(base + TOK_TIME).assign(&(&time_tok.row(b) + &pos.row(TOK_TIME)));
            x.row_mut(base + TOK_LATENT).assign(&(&lat_tok.row(b) + &pos.row(TOK_LATENT)));
            x.row_mut(base + TOK_QUERY).assign(&(&query + &pos.row(TOK_QUERY)));
        }

        let mut blocks = Vec::with_capacity(lay.blocks.len());
        for block in &lay.blocks {
            let (out, cache) = self.block_forward(x, *block, batch);
            x = out;
            blocks.push(cache);
        }

        let last = x.slice(s![TOK_QUERY..;SEQ_LEN, ..]).to_owned();
        let (final_h, final_ln) = layer_norm(&last, lay.final_ln, p);
        let pred = linear(&final_h.view(), lay.head, p);
        let cache = ForwardCache {
            batch,
            conds,
            time_feats,
            latents: inputs.latents.clone(),
            drop_cond: inputs.drop_cond.clone(),
            blocks,
            final_ln,
            final_h,
        };
        Ok((pred, cache))
    }

    fn block_forward(&self, x: Array2<f64>, block: Block, batch: usize) -> (Array2<f64>, BlockCache) {
        let p = &self.params[..];
        let w = self.config.width;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (h1, ln1) = layer_norm(&x, block.ln1, p);
        let qkv = linear(&h1.view(), block.qkv, p);
        let mut probs = vec![0.0; batch * heads * SEQ_LEN * SEQ_LEN];
        let mut attn = Array2::zeros((batch * SEQ_LEN, w));
        for b in 0..batch {
            let base = b * SEQ_LEN;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, w + h * dh, 2 * w + h * dh);
                let pr = &mut probs[(b * heads + h) * SEQ_LEN * SEQ_LEN..][..SEQ_LEN * SEQ_LEN];
                for i in 0..SEQ_LEN {
                    let q = qkv.row(base + i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = qkv.row(base + j);
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q[qo + c] * k[ko + c];
                        }
                        let sc = dot * scale;
                        pr[i * SEQ_LEN + j] = sc;
                        max = max.max(sc);
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let e = (pr[i * SEQ_LEN + j] - max).exp();
                        pr[i * SEQ_LEN + j] = e;
                        sum += e;
                    }
                    for j in 0..=i {
                        pr[i * SEQ_LEN + j] /= sum;
                    }
                    let mut out = attn.row_mut(base + i);
                    for j in 0..=i {
                        let pij = pr[i * SEQ_LEN + j];
                        let v = qkv.row(base + j);
                        for c in 0..dh {
                            out[h * dh + c] += pij * v[vo + c];
                        }
                    }
                }
            }
        }
        let x_mid = x + linear(&attn.view(), block.attn_out, p);
        let (h2, ln2) = layer_norm(&x_mid, block.ln2, p);
        let pre_act = linear(&h2.view(), block.ff_in, p);
        let act = pre_act.mapv(gelu);
        let x_out = x_mid + linear(&act.view(), block.ff_out, p);
        (
            x_out,
            BlockCache {
                h1,
                ln1,
                qkv,
                probs,
                attn,
                h2,
                ln2,
                pre_act,
                act,
            },
        )
    }

    /// Gradient of `sum(d_pred * pred)` with respect to every parameter,
    /// laid out like [`Self::params`].
    pub fn backward(&self, cache: &ForwardCache, d_pred: &Array2<f64>) -> Result<Vec<f64>> {
        check_len("prediction gradient rows", cache.batch, d_pred.nrows())?;
        check_len("prediction gradient width", self.config.io_dim(), d_pred.ncols())?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(cache, d_pred, &mut grad);
        Ok(grad)
    }

    pub fn backward_into(&self, cache: &ForwardCache, d_pred: &Array2<f64>, grad: &mut [f64]) {
        let p = &self.params[..];
        let lay = &self.layout;
        let w = self.config.width;
        let batch = cache.batch;

        let d_final = linear_backward(&cache.final_h.view(), &d_pred.view(), lay.head, p, grad);
        let d_last = layer_norm_backward(&d_final, &cache.final_ln, lay.final_ln, p, grad);
        let mut dx = Array2::zeros((batch * SEQ_LEN, w));
        dx.slice_mut(s![TOK_QUERY..;SEQ_LEN, ..]).assign(&d_last);

        for (block, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(dx, *block, bc, batch, grad);
        }

        // Token embeddings.
        let d_cond = dx.slice(s![TOK_COND..;SEQ_LEN, ..]);
        let d_time = dx.slice(s![TOK_TIME..;SEQ_LEN, ..]);
        let d_lat = dx.slice(s![TOK_LATENT..;SEQ_LEN, ..]);
        let d_query = dx.slice(s![TOK_QUERY..;SEQ_LEN, ..]);

        let d_cond_in = linear_backward(&cache.conds.view(), &d_cond, lay.cond_proj, p, grad);
        {
            let dn = lay.null_embedding.slice_mut(grad);
            for (row, &drop) in d_cond_in.rows().into_iter().zip(&cache.drop_cond) {
                if drop {
                    for (g, d) in dn.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
        }
        linear_param_grads(&cache.time_feats.view(), &d_time, lay.time_proj, grad);
        linear_param_grads(&cache.latents.view(), &d_lat, lay.latent_proj, grad);
        {
            let dq = lay.query.slice_mut(grad);
            for row in d_query.rows() {
                for (g, d) in dq.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dpos = lay.pos.view_mut(grad);
        for (tok, mut prow) in dpos.rows_mut().into_iter().enumerate() {
            prow += &dx.slice(s![tok..;SEQ_LEN, ..]).sum_axis(Axis(0));
        }
    }

    fn block_backward(&self, dx_out: Array2<f64>, block: Block, bc: &BlockCache, batch: usize, grad: &mut [f64]) -> Array2<f64> {
        let p = &self.params[..];
        let w = self.config.width;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // Feed-forward residual.
        let d_act = linear_backward(&bc.act.view(), &dx_out.view(), block.ff_out, p, grad);
        let mut d_pre = d_act;
        d_pre.zip_mut_with(&bc.pre_act, |d, &u| *d *= gelu_grad(u));
        let d_h2 = linear_backward(&bc.h2.view(), &d_pre.view(), block.ff_in, p, grad);
        let mut dx_mid = dx_out;
        dx_mid += &layer_norm_backward(&d_h2, &bc.ln2, block.ln2, p, grad);

        // Attention residual.
        let d_attn = linear_backward(&bc.attn.view(), &dx_mid.view(), block.attn_out, p, grad);
        let mut d_qkv = Array2::zeros((batch * SEQ_LEN, 3 * w));
        let qkv = &bc.qkv;
        for b in 0..batch {
            let base = b * SEQ_LEN;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, w + h * dh, 2 * w + h * dh);
                let pr = &bc.probs[(b * heads + h) * SEQ_LEN * SEQ_LEN..][..SEQ_LEN * SEQ_LEN];
                for i in 0..SEQ_LEN {
                    let d_o = d_attn.row(base + i);
                    let mut dp = [0.0; SEQ_LEN];
                    for j in 0..=i {
                        let v = qkv.row(base + j);
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += d_o[h * dh + c] * v[vo + c];
                        }
                        dp[j] = acc;
                        let pij = pr[i * SEQ_LEN + j];
                        let mut dv = d_qkv.row_mut(base + j);
                        for c in 0..dh {
                            dv[vo + c] += pij * d_o[h * dh + c];
                        }
                    }
                    let weighted: f64 = (0..=i).map(|j| pr[i * SEQ_LEN + j] * dp[j]).sum();
                    for j in 0..=i {
                        let ds = pr[i * SEQ_LEN + j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            let kc = qkv[[base + j, ko + c]];
                            let qc = qkv[[base + i, qo + c]];
                            d_qkv[[base + i, qo + c]] += ds * kc;
                            d_qkv[[base + j, ko + c]] += ds * qc;
                        }
                    }
                }
            }
        }
        let d_h1 = linear_backward(&bc.h1.view(), &d_qkv.view(), block.qkv, p, grad);
        dx_mid += &layer_norm_backward(&d_h1, &bc.ln1, block.ln1, p, grad);
        dx_mid
    }
}
