//! Ancestral reverse diffusion from a conditioning embedding to a latent,
//! with classifier-free guidance.
//!
//! Every step evaluates the network twice (conditional and null-condition)
//! as separate single-row passes, so a guidance scale of exactly 1 or 0
//! reproduces pure conditional or unconditional sampling bit-for-bit.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::network::{apply_cfg, ParamKind, PriorNetwork};
use crate::schedule::{NoiseSchedule, ReverseVariance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    /// Per-coordinate clamp on the predicted clean latent (`PredictW0` only).
    pub clamp_w0: Option<f64>,
    pub variance: ReverseVariance,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 3.0,
            clamp_w0: None,
            variance: ReverseVariance::Posterior,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::param("guidance_scale", "must be finite and >= 0"));
        }
        if let Some(c) = self.clamp_w0 {
            if !(c > 0.0) {
                return Err(Error::param("clamp_w0", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Guidance {
    Cfg(f64),
    Conditional,
    Unconditional,
}

/// Everything needed to replay a chain: the starting state, the noise drawn
/// at each step (ordered `t = T..1`, zero at `t = 1`), and the states visited.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub initial: Vec<f64>,
    pub noises: Vec<Vec<f64>>,
    /// `states[i]` is the state after the update at `t = T - i`.
    pub states: Vec<Vec<f64>>,
    pub network_evals: usize,
}

/// Per-item wall clock of [`sample_batch`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub per_item_s: Vec<f64>,
    /// Running total after each item; non-decreasing.
    pub cumulative_s: Vec<f64>,
}

impl TimingReport {
    pub fn mean_s(&self) -> f64 {
        if self.per_item_s.is_empty() {
            0.0
        } else {
            self.per_item_s.iter().sum::<f64>() / self.per_item_s.len() as f64
        }
    }
}

/// RNG for item `index` of a sampling call seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn run_chain(
    net: &PriorNetwork,
    e: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guidance: Guidance,
    initial: Vec<f64>,
    mut noise: impl FnMut(usize) -> Result<Vec<f64>>,
    keep_states: bool,
) -> Result<(Vec<f64>, SampleTrace)> {
    cfg.validate()?;
    let dim = net.config().io_dim();
    check_len("sampler initial state", dim, initial.len())?;
    check_len("sampler embedding", net.config().embed_dim, e.len())?;
    if net.config().timesteps < sched.steps() {
        return Err(Error::param(
            "schedule",
            format!(
                "schedule has {} steps but the network accepts {}",
                sched.steps(),
                net.config().timesteps
            ),
        ));
    }
    let kind = net.config().param_kind;
    let mut state = initial.clone();
    let mut noises = Vec::with_capacity(sched.steps());
    let mut states = Vec::new();
    let mut evals = 0;
    for t in (1..=sched.steps()).rev() {
        let cond = net.forward(&state, t, e, false)?;
        let uncond = net.forward(&state, t, e, true)?;
        evals += 2;
        let pred = match guidance {
            Guidance::Cfg(scale) => apply_cfg(&cond, &uncond, scale)?,
            Guidance::Conditional => cond,
            Guidance::Unconditional => uncond,
        };
        let mean = match kind {
            ParamKind::PredictW0 => {
                let w0 = match cfg.clamp_w0 {
                    Some(c) => pred.iter().map(|x| x.clamp(-c, c)).collect(),
                    None => pred,
                };
                sched.mu_from_w0(&state, t, &w0)?
            }
            ParamKind::PredictEps => sched.mu_from_eps(&state, t, &pred)?,
        };
        let z = if t > 1 { noise(t)? } else { vec![0.0; dim] };
        check_len("sampler noise", dim, z.len())?;
        let sigma = sched.sigma(t, cfg.variance);
        state = mean.iter().zip(&z).map(|(m, z)| m + sigma * z).collect();
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("sampler state at t = {t}"),
            });
        }
        noises.push(z);
        if keep_states {
            states.push(state.clone());
        }
    }
    Ok((
        state,
        SampleTrace {
            initial,
            noises,
            states,
            network_evals: evals,
        },
    ))
}

fn sample_with(
    net: &PriorNetwork,
    e: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guidance: Guidance,
    rng: &mut ChaCha8Rng,
    keep_states: bool,
) -> Result<(Vec<f64>, SampleTrace)> {
    let dim = net.config().io_dim();
    let initial = draw(rng, dim);
    run_chain(net, e, sched, cfg, guidance, initial, |_| Ok(draw(rng, dim)), keep_states)
}

/// Guided ancestral sample conditioned on `e`; deterministic per `seed`.
pub fn sample(net: &PriorNetwork, e: &[f64], sched: &NoiseSchedule, cfg: &SamplerConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = item_rng(seed, 0);
    Ok(sample_with(net, e, sched, cfg, Guidance::Cfg(cfg.guidance_scale), &mut rng, false)?.0)
}

/// Like [`sample`] but also returns the full trajectory and noise draws.
pub fn sample_traced(
    net: &PriorNetwork,
    e: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<f64>, SampleTrace)> {
    let mut rng = item_rng(seed, 0);
    sample_with(net, e, sched, cfg, Guidance::Cfg(cfg.guidance_scale), &mut rng, true)
}

/// Sampling with the conditional prediction only (no guidance arithmetic).
pub fn sample_conditional(
    net: &PriorNetwork,
    e: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = item_rng(seed, 0);
    Ok(sample_with(net, e, sched, cfg, Guidance::Conditional, &mut rng, false)?.0)
}

/// Sampling with the null-condition prediction only.
pub fn sample_unconditional(
    net: &PriorNetwork,
    e: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = item_rng(seed, 0);
    Ok(sample_with(net, e, sched, cfg, Guidance::Unconditional, &mut rng, false)?.0)
}

/// Re-runs a chain from a recorded trace, returning the new trajectory.
pub fn replay(
    net: &PriorNetwork,
    e: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    trace: &SampleTrace,
) -> Result<(Vec<f64>, SampleTrace)> {
    let mut it = trace.noises.iter();
    run_chain(
        net,
        e,
        sched,
        cfg,
        Guidance::Cfg(cfg.guidance_scale),
        trace.initial.clone(),
        |t| {
            it.next()
                .cloned()
                .ok_or_else(|| Error::contract(format!("trace has no noise for t = {t}")))
        },
        true,
    )
}

/// Samples one latent per embedding; item `i` uses RNG stream `i` of `seed`,
/// so item 0 equals [`sample`] with the same seed.
pub fn sample_batch(
    net: &PriorNetwork,
    embeddings: &[Vec<f64>],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, TimingReport)> {
    let mut latents = Vec::with_capacity(embeddings.len());
    let mut timing = TimingReport {
        per_item_s: Vec::with_capacity(embeddings.len()),
        cumulative_s: Vec::with_capacity(embeddings.len()),
    };
    let start = Instant::now();
    for (i, e) in embeddings.iter().enumerate() {
        let item_start = Instant::now();
        let mut rng = item_rng(seed, i as u64);
        let (w, _) = sample_with(net, e, sched, cfg, Guidance::Cfg(cfg.guidance_scale), &mut rng, false)?;
        latents.push(w);
        timing.per_item_s.push(item_start.elapsed().as_secs_f64());
        timing.cumulative_s.push(start.elapsed().as_secs_f64());
    }
    Ok((latents, timing))
}
