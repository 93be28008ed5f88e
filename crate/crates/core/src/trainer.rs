//! Optimization loop: batches, per-view condition dropout, triplet mining,
//! the combined objective, Adam updates, logging and checkpoint resume.
//!
//! Every random decision of a step is drawn up front into a [`StepPlan`]
//! from the trainer's single ChaCha stream, in a fixed order. Evaluating a
//! plan is then a pure function of the parameters, which is what the
//! gradient checks and the resume-equivalence guarantee rely on.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_batch, pseudo_text_augment, Dataset, TrainingBatch};
use crate::error::{Error, Result};
use crate::losses::{
    diffusion_loss, diffusion_loss_grad, l2_view_loss, l2_view_loss_grad, total_loss, triplet_loss_grad, LossParts,
    LossReport, LossWeights,
};
use crate::network::{NetInputs, ParamKind, PriorConfig, PriorNetwork};
use crate::optim::{clip_grad_norm, Adam};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoTextConfig {
    /// Perturbation strength on the unit sphere.
    pub xi: f64,
    /// Fraction of conditioning embeddings that get perturbed each step.
    pub fraction: f64,
}

impl Default for PseudoTextConfig {
    fn default() -> Self {
        Self { xi: 0.1, fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_identities: usize,
    pub views: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub grad_clip: Option<f64>,
    pub pseudo_text: PseudoTextConfig,
    pub adam: AdamConfig,
    pub prior: PriorConfig,
    pub schedule: ScheduleSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// One-core preset: 2000 steps of 16 identities x 4 views.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-3,
            batch_identities: 16,
            views: 4,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_interval: 0,
            log_interval: 1,
            grad_clip: None,
            pseudo_text: PseudoTextConfig::default(),
            adam: AdamConfig::default(),
            prior: PriorConfig::desk(),
            schedule: ScheduleSpec::default(),
        }
    }

    /// Hyperparameters of the full-size runs: lr 1e-4, 10^6 steps, 64 x 8 batches.
    pub fn full() -> Self {
        Self {
            iterations: 1_000_000,
            learning_rate: 1e-4,
            batch_identities: 64,
            views: 8,
            checkpoint_interval: 10_000,
            log_interval: 100,
            prior: PriorConfig::full(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::param("iterations", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be finite and >= 0"));
        }
        if self.batch_identities < 1 {
            return Err(Error::param("batch_identities", "must be >= 1"));
        }
        if self.views < 1 {
            return Err(Error::param("views", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_text.fraction) {
            return Err(Error::param("pseudo_text.fraction", "must lie in [0, 1]"));
        }
        if !(self.pseudo_text.xi >= 0.0) {
            return Err(Error::param("pseudo_text.xi", "must be >= 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::param("grad_clip", "must be > 0"));
            }
        }
        if self.log_interval < 1 {
            return Err(Error::param("log_interval", "must be >= 1"));
        }
        if self.prior.timesteps != self.schedule.steps {
            return Err(Error::param(
                "prior.timesteps",
                format!(
                    "network accepts {} timesteps but the schedule has {}",
                    self.prior.timesteps, self.schedule.steps
                ),
            ));
        }
        self.weights.validate()?;
        self.prior.validate()
    }
}

/// Anchor, positive and negative as row indices into the step's views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// A fully-resolved training step: the batch plus every random decision.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub batch: TrainingBatch,
    pub inputs: NetInputs,
    /// Row range of each identity group.
    pub groups: Vec<std::ops::Range<usize>>,
    pub triplets: Vec<Triplet>,
}

/// Which scalar to differentiate in [`evaluate_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Diffusion,
    ViewL2,
    Triplet,
    Total,
}

/// Draws a step plan. Order of RNG use: batch, then per view the
/// pseudo-text coin and perturbation, then per view the dropout coin, then
/// per anchor the positive and negative picks.
pub fn plan_step<R: Rng + ?Sized>(
    dataset: &Dataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepPlan> {
    let mut batch = make_batch(dataset, cfg.batch_identities, cfg.views, sched, rng)?;
    for group in &mut batch.groups {
        for view in &mut group.views {
            if cfg.pseudo_text.fraction > 0.0 && rng.random_bool(cfg.pseudo_text.fraction) {
                *view = pseudo_text_augment(view, cfg.pseudo_text.xi, rng)?;
            }
        }
    }
    let rows = batch.len();
    let drop_cond: Vec<bool> = (0..rows)
        .map(|_| cfg.prior.cond_dropout_prob > 0.0 && rng.random_bool(cfg.prior.cond_dropout_prob))
        .collect();

    let dim = batch.groups[0].wt.len();
    let edim = batch.groups[0].views[0].dim();
    let mut latents = Array2::zeros((rows, dim));
    let mut conds = Array2::zeros((rows, edim));
    let mut timesteps = Vec::with_capacity(rows);
    let mut groups = Vec::with_capacity(batch.groups.len());
    let mut row = 0;
    for g in &batch.groups {
        let start = row;
        for v in &g.views {
            latents.row_mut(row).assign(&ndarray::ArrayView1::from(&g.wt));
            conds.row_mut(row).assign(&ndarray::ArrayView1::from(&v.values));
            timesteps.push(g.t);
            row += 1;
        }
        groups.push(start..row);
    }

    let mut triplets = Vec::new();
    if cfg.weights.use_triplet {
        let kept: Vec<Vec<usize>> = groups
            .iter()
            .map(|r| r.clone().filter(|&i| !drop_cond[i]).collect())
            .collect();
        for (gi, members) in kept.iter().enumerate() {
            for &anchor in members {
                let positives: Vec<usize> = members.iter().copied().filter(|&i| i != anchor).collect();
                let negatives: Vec<usize> = kept
                    .iter()
                    .enumerate()
                    .filter(|(gj, _)| *gj != gi)
                    .flat_map(|(_, m)| m.iter().copied())
                    .collect();
                let (Some(&positive), Some(&negative)) = (positives.choose(rng), negatives.choose(rng)) else {
                    continue;
                };
                triplets.push(Triplet {
                    anchor,
                    positive,
                    negative,
                });
            }
        }
        if triplets.is_empty() && cfg.weights.contrast_active() {
            log::warn!("batch yields no triplet candidates; triplet term is 0 for this step");
        }
    }

    Ok(StepPlan {
        batch,
        inputs: NetInputs {
            latents,
            timesteps,
            conds,
            drop_cond,
        },
        groups,
        triplets,
    })
}

fn rows_of(a: &Array2<f64>) -> Vec<&[f64]> {
    a.rows().into_iter().map(|r| r.to_slice().expect("contiguous row")).collect()
}

/// Losses for a plan and, if requested, the gradient of one objective with
/// respect to every network parameter.
///
/// Contrastive terms act on the clean-latent estimate: the prediction itself
/// in `PredictW0` mode, or the latent reconstructed from the predicted noise
/// in `PredictEps` mode. Dropped-condition rows never enter them.
pub fn evaluate_plan(
    net: &PriorNetwork,
    plan: &StepPlan,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    objective: Option<Objective>,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    let (pred, cache) = net.forward_cached(&plan.inputs)?;
    let rows = pred.nrows();
    let dim = pred.ncols();
    let kind = net.config().param_kind;

    let mut target = Array2::zeros((rows, dim));
    for (g, range) in plan.batch.groups.iter().zip(&plan.groups) {
        let src = match kind {
            ParamKind::PredictW0 => &g.w0,
            ParamKind::PredictEps => &g.eps,
        };
        for r in range.clone() {
            target.row_mut(r).assign(&ndarray::ArrayView1::from(src));
        }
    }
    let pred_flat = pred.as_slice().expect("standard layout");
    let l_diff = diffusion_loss(pred_flat, target.as_slice().expect("standard layout"))?;

    // Clean-latent estimates used by the contrastive terms, and the chain
    // factor d(estimate)/d(prediction) per row.
    let (est, chain): (Array2<f64>, Vec<f64>) = match kind {
        ParamKind::PredictW0 => (pred.clone(), vec![1.0; rows]),
        ParamKind::PredictEps => {
            let mut est = Array2::zeros((rows, dim));
            let mut chain = vec![0.0; rows];
            for r in 0..rows {
                let t = plan.inputs.timesteps[r];
                let wt = plan.inputs.latents.row(r);
                let w0 = sched.w0_from_eps(wt.as_slice().expect("row"), t, pred.row(r).as_slice().expect("row"))?;
                est.row_mut(r).assign(&ndarray::ArrayView1::from(&w0));
                chain[r] = sched.w0_eps_factor(t);
            }
            (est, chain)
        }
    };
    let est_rows = rows_of(&est);

    let mut d_l2 = Array2::zeros((rows, dim));
    let mut l_2 = 0.0;
    if weights.use_l2 {
        let mut n_groups = 0usize;
        for range in &plan.groups {
            let kept: Vec<usize> = range.clone().filter(|&i| !plan.inputs.drop_cond[i]).collect();
            if kept.len() < 2 {
                continue;
            }
            let views: Vec<&[f64]> = kept.iter().map(|&i| est_rows[i]).collect();
            l_2 += l2_view_loss(&views)?;
            for (&i, g) in kept.iter().zip(l2_view_loss_grad(&views)?) {
                d_l2.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
            }
            n_groups += 1;
        }
        if n_groups > 0 {
            l_2 /= n_groups as f64;
            d_l2 /= n_groups as f64;
        }
    }

    let mut d_tri = Array2::zeros((rows, dim));
    let mut l_tri = 0.0;
    if weights.use_triplet && !plan.triplets.is_empty() {
        let n = plan.triplets.len() as f64;
        for tr in &plan.triplets {
            let (loss, [ga, gp, gn]) =
                triplet_loss_grad(est_rows[tr.anchor], est_rows[tr.positive], est_rows[tr.negative], weights.margin)?;
            l_tri += loss;
            for (row, g) in [(tr.anchor, ga), (tr.positive, gp), (tr.negative, gn)] {
                let mut dst = d_tri.row_mut(row);
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += v / n;
                }
            }
        }
        l_tri /= n;
    }

    let report = total_loss(LossParts { l_diff, l_2, l_tri }, weights)?;

    let Some(objective) = objective else {
        return Ok((report, None));
    };
    let chain_rows = |mut d: Array2<f64>| {
        for (mut row, c) in d.rows_mut().into_iter().zip(&chain) {
            row *= *c;
        }
        d
    };
    let d_diff = Array2::from_shape_vec(
        (rows, dim),
        diffusion_loss_grad(pred_flat, target.as_slice().expect("standard layout"))?,
    )
    .expect("shape");
    let d_pred = match objective {
        Objective::Diffusion => d_diff,
        Objective::ViewL2 => chain_rows(d_l2),
        Objective::Triplet => chain_rows(d_tri),
        Objective::Total => {
            let contrast = chain_rows(d_l2 + d_tri);
            d_diff * weights.lambda_diff + contrast * weights.lambda_contrast
        }
    };
    Ok((report, Some(net.backward(&cache, &d_pred)?)))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    sched: NoiseSchedule,
    net: PriorNetwork,
    opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh trainer. The network is initialized from stream 1 of the seed;
    /// training randomness uses stream 0.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sched = config.schedule.build()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(1);
        let net = PriorNetwork::new(config.prior.clone(), &mut init_rng)?;
        let opt = Adam::new(
            net.param_count(),
            config.learning_rate,
            config.adam.beta1,
            config.adam.beta2,
            config.adam.eps,
        );
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            sched,
            net,
            opt,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let parts = ckpt.into_parts()?;
        let sched = parts.config.schedule.build()?;
        let opt = parts
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state; cannot resume".into()))?;
        let rng = parts
            .rng
            .ok_or_else(|| Error::Format("checkpoint has no RNG state; cannot resume".into()))?;
        if opt.len() != parts.net.param_count() {
            return Err(Error::Format("optimizer state does not match the parameter count".into()));
        }
        Ok(Self {
            config: parts.config,
            sched,
            net: parts.net,
            opt,
            rng,
            step: parts.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, &self.net, self.step, Some(&self.opt), Some(&self.rng))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &PriorNetwork {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Changes the iteration budget, e.g. to extend a resumed run.
    pub fn set_iterations(&mut self, iterations: usize) {
        self.config.iterations = iterations;
    }

    /// Samples a plan, evaluates the objective and applies one Adam update.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossReport> {
        let plan = plan_step(dataset, &self.sched, &self.config, &mut self.rng)?;
        let (report, grad) = evaluate_plan(&self.net, &plan, &self.sched, &self.config.weights, Some(Objective::Total))
            .map_err(|e| match e {
                Error::NonFinite { term } => Error::NonFinite {
                    term: format!("{term} at step {}", self.step + 1),
                },
                other => other,
            })?;
        let mut grad = grad.expect("gradient requested");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("gradient at step {}", self.step + 1),
            });
        }
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(&mut grad, max);
        }
        self.opt.update(self.net.params_mut(), &grad);
        self.step += 1;
        Ok(report)
    }

    /// Runs until `config.iterations` steps are done, calling `on_step` after
    /// each one.
    pub fn run<F>(&mut self, dataset: &Dataset, mut on_step: F) -> Result<Vec<LossReport>>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<()>,
    {
        check_dataset(&self.config, dataset)?;
        let start = Instant::now();
        let mut reports = Vec::with_capacity(self.config.iterations.saturating_sub(self.step));
        while self.step < self.config.iterations {
            let report = self.train_step(dataset)?;
            let record = StepRecord {
                step: self.step,
                report,
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            on_step(self, &record)?;
            reports.push(report);
        }
        Ok(reports)
    }
}

/// Checks that `dataset` can feed training under `cfg`.
pub fn check_dataset(cfg: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if dataset.len() < cfg.batch_identities {
        return Err(Error::Config {
            key: "batch_identities".into(),
            reason: format!(
                "batch needs {} identities, dataset holds {}",
                cfg.batch_identities,
                dataset.len()
            ),
        });
    }
    if dataset.header.views_per_identity < cfg.views {
        return Err(Error::Config {
            key: "views".into(),
            reason: format!(
                "batch needs {} views per identity, dataset holds {}",
                cfg.views, dataset.header.views_per_identity
            ),
        });
    }
    if dataset.header.latent_dim != cfg.prior.io_dim() {
        return Err(Error::Config {
            key: "prior.latent_dim".into(),
            reason: format!(
                "dataset latents have {} values, network expects {}",
                dataset.header.latent_dim,
                cfg.prior.io_dim()
            ),
        });
    }
    if dataset.header.embed_dim != cfg.prior.embed_dim {
        return Err(Error::Config {
            key: "prior.embed_dim".into(),
            reason: format!(
                "dataset embeddings have {} values, network expects {}",
                dataset.header.embed_dim, cfg.prior.embed_dim
            ),
        });
    }
    Ok(())
}

/// Where [`train_loop`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct LoopOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Full training run with a newline-delimited JSON log and periodic
/// checkpoints. A fresh log starts with a `config` record; resumed runs
/// append to it.
pub fn train_loop(trainer: &mut Trainer, dataset: &Dataset, outputs: &LoopOutputs) -> Result<Vec<LossReport>> {
    check_dataset(trainer.config(), dataset)?;
    let mut log = match &outputs.log {
        Some(path) => {
            let fresh = trainer.step_index() == 0;
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(path)?;
            let mut w = BufWriter::new(file);
            if fresh {
                let header = serde_json::json!({ "kind": "config", "config": trainer.config() });
                writeln!(w, "{header}")?;
            }
            Some(w)
        }
        None => None,
    };
    let interval = trainer.config().checkpoint_interval;
    let log_every = trainer.config().log_interval;
    let ckpt_path = outputs.checkpoint.clone();
    let reports = trainer.run(dataset, |tr, rec| {
        if let Some(w) = log.as_mut() {
            if rec.step % log_every == 0 || rec.step == tr.config().iterations {
                let mut line = serde_json::to_value(rec)?;
                line["kind"] = "step".into();
                writeln!(w, "{line}")?;
            }
        }
        if let Some(path) = &ckpt_path {
            if interval > 0 && rec.step % interval == 0 && rec.step < tr.config().iterations {
                tr.checkpoint().save(path)?;
            }
        }
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(path) = &outputs.checkpoint {
        trainer.checkpoint().save(path)?;
    }
    Ok(reports)
}

/// Reads the step records of a log written by [`train_loop`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("step") {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}
