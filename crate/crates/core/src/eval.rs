//! View-invariance, latent recovery, frontal-view text/image similarity, and
//! the ablation suite.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Backend, CameraPose, Dataset};
use crate::error::{check_len, Error, Result};
use crate::losses::LossWeights;
use crate::network::{NetInputs, ParamKind, PriorNetwork};
use crate::sampler::{sample_batch, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::trainer::{TrainConfig, Trainer};

/// Published frontal-view text/image similarity for context:
/// `(method, generator, score)`. Not reproducible without pretrained models.
pub const REFERENCE_CLIP_SCORES: &[(&str, &str, f64)] = &[
    ("ours", "stylenerf", 0.337),
    ("ours", "eg3d", 0.291),
    ("clip2latent", "stylenerf", 0.282),
    ("clip2latent", "eg3d", 0.245),
    ("optimization", "stylenerf", 0.358),
    ("optimization", "eg3d", 0.343),
];

/// Ablation ordering on frontal-view similarity (StyleNeRF):
/// full > eps-parameterized > no L2 > no triplet.
pub const REFERENCE_ABLATION_ORDER: &[(&str, f64)] = &[
    ("full", 0.337),
    ("eps_param", 0.311),
    ("no_l2", 0.305),
    ("no_triplet", 0.287),
];

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Clean-latent estimates for rows sharing `(wt, t)`, one per embedding.
fn clean_estimates(net: &PriorNetwork, sched: &NoiseSchedule, wt: &[f64], t: usize, embs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let n = embs.len();
    let dim = wt.len();
    let edim = net.config().embed_dim;
    let mut latents = ndarray::Array2::zeros((n, dim));
    let mut conds = ndarray::Array2::zeros((n, edim));
    for (i, e) in embs.iter().enumerate() {
        check_len("evaluation embedding", edim, e.len())?;
        latents.row_mut(i).assign(&ndarray::ArrayView1::from(wt));
        conds.row_mut(i).assign(&ndarray::ArrayView1::from(*e));
    }
    let pred = net.forward_batch(&NetInputs {
        latents,
        timesteps: vec![t; n],
        conds,
        drop_cond: vec![false; n],
    })?;
    pred.rows()
        .into_iter()
        .map(|row| {
            let row = row.to_vec();
            match net.config().param_kind {
                ParamKind::PredictW0 => Ok(row),
                ParamKind::PredictEps => sched.w0_from_eps(wt, t, &row),
            }
        })
        .collect()
}

struct Probe {
    identity: usize,
    t: usize,
    wt: Vec<f64>,
}

fn draw_probe<R: Rng>(rng: &mut R, dataset: &Dataset, sched: &NoiseSchedule) -> Result<Probe> {
    let identity = rng.random_range(0..dataset.len());
    let t = rng.random_range(1..=sched.steps());
    let w0 = &dataset.identities[identity].w0;
    let eps: Vec<f64> = (0..w0.len()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Probe {
        identity,
        t,
        wt: sched.q_sample(w0, t, &eps)?,
    })
}

fn ratio(dist_sum: f64, norm_sum: f64) -> f64 {
    if dist_sum == 0.0 {
        0.0
    } else {
        dist_sum / norm_sum
    }
}

/// Mean pairwise distance between the clean-latent estimates produced from
/// different views of one identity at a shared `(w_t, t)`, divided by the
/// mean estimate norm. Zero iff every probe's estimates coincide.
///
/// `ε`-parameterized networks are scored on their reconstructed `w0`.
pub fn view_invariance_score(net: &PriorNetwork, dataset: &Dataset, sched: &NoiseSchedule, n_probes: usize, seed: u64) -> Result<f64> {
    let k = dataset.header.views_per_identity;
    if k < 2 {
        return Err(Error::contract(format!("view invariance needs >= 2 views, dataset has {k}")));
    }
    if dataset.is_empty() || n_probes == 0 {
        return Err(Error::contract("view invariance needs a non-empty dataset and >= 1 probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dist_sum, mut norm_sum) = (0.0, 0.0);
    for _ in 0..n_probes {
        let probe = draw_probe(&mut rng, dataset, sched)?;
        let views = &dataset.identities[probe.identity].views;
        let embs: Vec<&[f64]> = views.iter().map(|v| v.embedding.values.as_slice()).collect();
        let est = clean_estimates(net, sched, &probe.wt, probe.t, &embs)?;
        let mut pair_sum = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                pair_sum += dist(&est[i], &est[j]);
            }
        }
        dist_sum += pair_sum / (k * (k - 1) / 2) as f64;
        norm_sum += est.iter().map(|e| norm(e)).sum::<f64>() / k as f64;
    }
    Ok(ratio(dist_sum, norm_sum))
}

/// The same normalized distance as [`view_invariance_score`], but between
/// views of two different identities at the first identity's `(w_t, t)`.
pub fn inter_identity_baseline(net: &PriorNetwork, dataset: &Dataset, sched: &NoiseSchedule, n_probes: usize, seed: u64) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(Error::contract("inter-identity baseline needs >= 2 identities"));
    }
    let k = dataset.header.views_per_identity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dist_sum, mut norm_sum) = (0.0, 0.0);
    for _ in 0..n_probes {
        let probe = draw_probe(&mut rng, dataset, sched)?;
        let other = loop {
            let o = rng.random_range(0..dataset.len());
            if o != probe.identity {
                break o;
            }
        };
        let a = &dataset.identities[probe.identity].views;
        let b = &dataset.identities[other].views;
        let embs: Vec<&[f64]> = a
            .iter()
            .chain(b.iter())
            .map(|v| v.embedding.values.as_slice())
            .collect();
        let est = clean_estimates(net, sched, &probe.wt, probe.t, &embs)?;
        dist_sum += (0..k).map(|i| dist(&est[i], &est[k + i])).sum::<f64>() / k as f64;
        norm_sum += est.iter().map(|e| norm(e)).sum::<f64>() / (2 * k) as f64;
    }
    Ok(ratio(dist_sum, norm_sum))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub cosine_mean: f64,
    pub l2_mean: f64,
    pub per_item_cosine: Vec<f64>,
    pub mean_sample_s: f64,
}

/// Samples a latent for each `(ground truth, embedding)` pair and compares
/// it with the ground truth.
pub fn recovery_from_pairs(
    net: &PriorNetwork,
    truths: &[Vec<f64>],
    embeddings: &[Vec<f64>],
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<RecoveryScore> {
    if truths.is_empty() {
        return Err(Error::contract("recovery needs at least one identity"));
    }
    check_len("recovery pairs", truths.len(), embeddings.len())?;
    let (latents, timing) = sample_batch(net, embeddings, sched, sampler, seed)?;
    let per_item_cosine: Vec<f64> = latents.iter().zip(truths).map(|(w, t)| cosine(w, t)).collect();
    let n = truths.len() as f64;
    Ok(RecoveryScore {
        cosine_mean: per_item_cosine.iter().sum::<f64>() / n,
        l2_mean: latents.iter().zip(truths).map(|(w, t)| dist(w, t)).sum::<f64>() / n,
        per_item_cosine,
        mean_sample_s: timing.mean_s(),
    })
}

/// Which view each held-out identity is conditioned on.
pub fn recovery_views(dataset: &Dataset, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..dataset.len())
        .map(|_| rng.random_range(0..dataset.header.views_per_identity))
        .collect()
}

/// For each held-out identity: sample from one view's embedding and compare
/// with the ground-truth latent.
pub fn recovery_score(
    net: &PriorNetwork,
    heldout: &Dataset,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<RecoveryScore> {
    if heldout.is_empty() {
        return Err(Error::contract("recovery needs a non-empty held-out dataset"));
    }
    let views = recovery_views(heldout, seed);
    let truths: Vec<Vec<f64>> = heldout.identities.iter().map(|i| i.w0.clone()).collect();
    let embs: Vec<Vec<f64>> = heldout
        .identities
        .iter()
        .zip(&views)
        .map(|(i, &v)| i.views[v].embedding.values.clone())
        .collect();
    recovery_from_pairs(net, &truths, &embs, sched, sampler, seed)
}

/// Mean cosine similarity between each prompt's text embedding and the
/// image embedding of its latent rendered at `pose`.
///
/// Requires a backend with both a generator and a text encoder; the
/// synthetic world reports an integration error.
pub fn clip_score<B: Backend + ?Sized>(backend: &B, prompts: &[String], latents: &[Vec<f64>], pose: CameraPose) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::contract("clip score needs at least one prompt"));
    }
    check_len("clip score latents", prompts.len(), latents.len())?;
    let mut sum = 0.0;
    for (prompt, w) in prompts.iter().zip(latents) {
        let text = backend.embed_text(prompt)?;
        let image = backend.embed_view(w, pose)?;
        sum += cosine(&text.values, &image.values);
    }
    Ok(sum / prompts.len() as f64)
}

/// One line per non-empty line of a prompt list; `#` starts a comment.
pub fn load_prompts(path: impl AsRef<std::path::Path>) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    EpsParam,
    NoL2,
    NoTriplet,
    NoContrast,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::EpsParam,
        Variant::NoL2,
        Variant::NoTriplet,
        Variant::NoContrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::EpsParam => "eps_param",
            Variant::NoL2 => "no_l2",
            Variant::NoTriplet => "no_triplet",
            Variant::NoContrast => "no_contrast",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let full = LossWeights {
            use_l2: true,
            use_triplet: true,
            ..base.weights
        };
        cfg.weights = full;
        cfg.prior.param_kind = ParamKind::PredictW0;
        match self {
            Variant::Full => {}
            Variant::EpsParam => cfg.prior.param_kind = ParamKind::PredictEps,
            Variant::NoL2 => cfg.weights.use_l2 = false,
            Variant::NoTriplet => cfg.weights.use_triplet = false,
            Variant::NoContrast => cfg.weights.lambda_contrast = 0.0,
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_probes: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_probes: 256,
            seed: 1234,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub view_invariance: f64,
    pub recovery: RecoveryScore,
}

/// Scores a trained network on a held-out dataset.
pub fn score_model(net: &PriorNetwork, heldout: &Dataset, sched: &NoiseSchedule, cfg: &EvalConfig) -> Result<ModelScores> {
    Ok(ModelScores {
        view_invariance: view_invariance_score(net, heldout, sched, cfg.n_probes, cfg.seed)?,
        recovery: recovery_score(net, heldout, sched, &cfg.sampler, cfg.seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub scores: Option<ModelScores>,
    /// Set when training or evaluation failed; the variant is still reported.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRanking {
    pub seed: u64,
    /// Best first by recovery cosine (higher is better).
    pub by_recovery: Vec<Variant>,
    /// Best first by view invariance (lower is better).
    pub by_invariance: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_config: TrainConfig,
    pub eval: EvalConfig,
    pub results: Vec<VariantResult>,
    pub rankings: Vec<SeedRanking>,
}

impl AblationReport {
    pub fn result(&self, variant: Variant, seed: u64) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Hash over configs and scores; wall-clock fields are excluded.
    pub fn hash(&self) -> String {
        let mut stripped = self.clone();
        for r in &mut stripped.results {
            if let Some(s) = r.scores.as_mut() {
                s.recovery.mean_sample_s = 0.0;
            }
        }
        let json = serde_json::to_vec(&stripped).expect("report serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// How many seeds rank `variant` first by recovery.
    pub fn recovery_wins(&self, variant: Variant) -> usize {
        self.rankings.iter().filter(|r| r.by_recovery.first() == Some(&variant)).count()
    }
}

fn rank_seed(results: &[VariantResult], seed: u64) -> SeedRanking {
    let scored: Vec<(&Variant, &ModelScores)> = results
        .iter()
        .filter(|r| r.seed == seed)
        .filter_map(|r| r.scores.as_ref().map(|s| (&r.variant, s)))
        .collect();
    let mut by_recovery = scored.clone();
    by_recovery.sort_by(|a, b| b.1.recovery.cosine_mean.total_cmp(&a.1.recovery.cosine_mean));
    let mut by_invariance = scored;
    by_invariance.sort_by(|a, b| a.1.view_invariance.total_cmp(&b.1.view_invariance));
    SeedRanking {
        seed,
        by_recovery: by_recovery.into_iter().map(|(v, _)| *v).collect(),
        by_invariance: by_invariance.into_iter().map(|(v, _)| *v).collect(),
    }
}

/// Trains a single variant and scores it, capturing failures in the result.
pub fn run_variant(
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
    train: &Dataset,
    heldout: &Dataset,
    eval: &EvalConfig,
) -> VariantResult {
    let mut cfg = variant.apply(base);
    cfg.seed = seed;
    let outcome = (|| -> Result<(f64, ModelScores)> {
        let mut trainer = Trainer::new(cfg)?;
        let reports = trainer.run(train, |_, _| Ok(()))?;
        let last = reports.last().map(|r| r.l_total).unwrap_or(f64::NAN);
        let scores = score_model(trainer.network(), heldout, trainer.schedule(), eval)?;
        Ok((last, scores))
    })();
    match outcome {
        Ok((loss, scores)) => VariantResult {
            variant,
            seed,
            final_loss: Some(loss),
            scores: Some(scores),
            failure: None,
        },
        Err(e) => {
            log::warn!("variant {} (seed {seed}) failed: {e}", variant.name());
            VariantResult {
                variant,
                seed,
                final_loss: None,
                scores: None,
                failure: Some(e.to_string()),
            }
        }
    }
}

/// Trains every variant for every seed on the same data and scores each on
/// the held-out set. Divergent variants are reported, not dropped.
pub fn ablation_suite(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train: &Dataset,
    heldout: &Dataset,
    eval: &EvalConfig,
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::contract("ablation needs at least one variant and one seed"));
    }
    let mut results = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for &variant in variants {
            log::info!("ablation: training {} with seed {seed}", variant.name());
            results.push(run_variant(base, variant, seed, train, heldout, eval));
        }
    }
    let rankings = seeds.iter().map(|&s| rank_seed(&results, s)).collect();
    Ok(AblationReport {
        base_config: base.clone(),
        eval: eval.clone(),
        results,
        rankings,
    })
}

/// Identities drawn for a held-out check, without replacement.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, dataset.len(), n.min(dataset.len())).into_vec();
    picks.sort_unstable();
    Dataset {
        header: dataset.header.clone(),
        identities: picks.into_iter().map(|i| dataset.identities[i].clone()).collect(),
    }
}
