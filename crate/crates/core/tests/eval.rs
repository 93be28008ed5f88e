//! Evaluation metrics and the ablation report.

use clfusion::data::{generate_dataset, Dataset, SyntheticWorld, WorldConfig};
use clfusion::eval::{
    ablation_suite, inter_identity_baseline, recovery_from_pairs, recovery_score, view_invariance_score, EvalConfig,
    Variant,
};
use clfusion::network::{PriorConfig, PriorNetwork};
use clfusion::sampler::SamplerConfig;
use clfusion::schedule::NoiseSchedule;
use clfusion::trainer::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(n: usize, seed: u64) -> Dataset {
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    generate_dataset(&world, n, 4, seed, serde_json::Value::Null).unwrap()
}

fn untrained(seed: u64) -> PriorNetwork {
    PriorNetwork::new(PriorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance between views of one identity over the mean distance
/// between same-index views of different identities, in embedding space.
fn embedding_distance_ratio(ds: &Dataset) -> f64 {
    let k = ds.header.views_per_identity;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    for (a, ia) in ds.identities.iter().enumerate() {
        for i in 0..k {
            for j in i + 1..k {
                intra += dist(&ia.views[i].embedding.values, &ia.views[j].embedding.values);
                ni += 1;
            }
        }
        for ib in &ds.identities[a + 1..] {
            for i in 0..k {
                inter += dist(&ia.views[i].embedding.values, &ib.views[i].embedding.values);
                nx += 1;
            }
        }
    }
    (intra / ni as f64) / (inter / nx as f64)
}

fn untrained_ratios(ds: &Dataset) -> Vec<f64> {
    let sched = NoiseSchedule::linear_default();
    (0..5)
        .map(|seed| {
            let net = untrained(seed);
            let score = view_invariance_score(&net, ds, &sched, 256, seed).unwrap();
            let baseline = inter_identity_baseline(&net, ds, &sched, 256, seed).unwrap();
            score / baseline
        })
        .collect()
}

#[test]
#[ignore = "fails on the synthetic world: untrained score/baseline is 0.40-0.61 because views of one identity are already \
            closer than other identities in embedding space (ratio 0.47); see untrained_network_mirrors_input_geometry"]
fn untrained_score_is_within_twenty_percent_of_inter_identity_baseline() {
    for r in untrained_ratios(&data(64, 1)) {
        assert!((r - 1.0).abs() <= 0.2, "score/baseline = {r}");
    }
}

#[test]
fn untrained_network_mirrors_input_geometry() {
    let ds = data(64, 1);
    let ratios = untrained_ratios(&ds);
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let input = embedding_distance_ratio(&ds);
    assert!((mean / input - 1.0).abs() <= 0.2, "network ratio {mean} vs embedding ratio {input}");
}

#[test]
fn invariance_is_label_and_order_free() {
    let ds = data(16, 2);
    let mut relabeled = ds.clone();
    for ident in &mut relabeled.identities {
        ident.identity_id = 1000 - ident.identity_id;
        ident.views.rotate_left(1);
    }
    let sched = NoiseSchedule::linear_default();
    let net = untrained(0);
    let a = view_invariance_score(&net, &ds, &sched, 64, 9).unwrap();
    let b = view_invariance_score(&net, &relabeled, &sched, 64, 9).unwrap();
    assert!((a - b).abs() <= 1e-10 * a);
    assert_eq!(a, view_invariance_score(&net, &ds, &sched, 64, 9).unwrap());
}

#[test]
fn untrained_recovery_is_isotropic() {
    let ds = data(64, 1);
    let sched = NoiseSchedule::linear_default();
    let net = untrained(3);
    let r = recovery_score(&net, &ds, &sched, &SamplerConfig::default(), 0).unwrap();
    let bound = 3.0 / ((ds.len() * ds.header.latent_dim) as f64).sqrt();
    assert!(r.cosine_mean.abs() < bound, "cosine {} vs bound {bound}", r.cosine_mean);
    assert_eq!(r.per_item_cosine.len(), 64);
}

#[test]
fn trained_model_recovers_matched_conditioning() {
    let train = data(64, 0);
    let heldout = data(32, 1);
    let mut trainer = Trainer::new(TrainConfig::desk()).unwrap();
    trainer.run(&train, |_, _| Ok(())).unwrap();
    let (net, sched) = (trainer.network(), trainer.schedule());
    let cfg = SamplerConfig::default();

    let trained = recovery_score(net, &heldout, sched, &cfg, 0).unwrap();
    let random = recovery_score(&untrained(0), &heldout, sched, &cfg, 0).unwrap();
    assert!(trained.cosine_mean > random.cosine_mean + 0.3, "{} vs {}", trained.cosine_mean, random.cosine_mean);

    // Permutation control on the training set: shift conditioning by one identity.
    let truths: Vec<Vec<f64>> = train.identities.iter().map(|i| i.w0.clone()).collect();
    let matched: Vec<Vec<f64>> = train.identities.iter().map(|i| i.views[0].embedding.values.clone()).collect();
    let mut shuffled = matched.clone();
    shuffled.rotate_left(1);
    let m = recovery_from_pairs(net, &truths, &matched, sched, &cfg, 5).unwrap();
    let s = recovery_from_pairs(net, &truths, &shuffled, sched, &cfg, 5).unwrap();
    assert!(m.cosine_mean > s.cosine_mean + 0.3, "matched {} vs permuted {}", m.cosine_mean, s.cosine_mean);
}

fn tiny_base() -> TrainConfig {
    TrainConfig {
        iterations: 30,
        batch_identities: 8,
        ..TrainConfig::desk()
    }
}

fn tiny_eval() -> EvalConfig {
    EvalConfig {
        n_probes: 16,
        ..EvalConfig::default()
    }
}

#[test]
fn ablation_report_is_deterministic() {
    let train = data(16, 0);
    let heldout = data(4, 1);
    let variants = [Variant::Full, Variant::EpsParam, Variant::NoContrast];
    let run = || ablation_suite(&tiny_base(), &variants, &[0, 1], &train, &heldout, &tiny_eval()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.results.len(), 6);
    assert_eq!(a.rankings.len(), 2);
    for r in &a.rankings {
        assert_eq!(r.by_recovery.len(), 3);
        assert_eq!(r.by_invariance.len(), 3);
    }
    let c = ablation_suite(&tiny_base(), &variants, &[0, 2], &train, &heldout, &tiny_eval()).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn divergent_variants_are_reported() {
    let train = data(16, 0);
    let heldout = data(4, 1);
    let base = TrainConfig {
        learning_rate: 1e300,
        ..tiny_base()
    };
    let report = ablation_suite(&base, &[Variant::Full], &[0], &train, &heldout, &tiny_eval()).unwrap();
    let r = &report.results[0];
    assert!(r.scores.is_none());
    assert!(r.failure.as_deref().unwrap_or("").contains("non-finite"), "{:?}", r.failure);
    assert!(report.rankings[0].by_recovery.is_empty());
}
