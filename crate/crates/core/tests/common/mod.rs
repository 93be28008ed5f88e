#![allow(dead_code)]

//! Test-only oracles, independent of the library's code paths.

use clfusion::data::{generate_dataset, SyntheticWorld, WorldConfig};
use clfusion::network::{ParamKind, PriorConfig, PriorNetwork};
use clfusion::schedule::NoiseSchedule;
use clfusion::trainer::{evaluate_plan, plan_step, Objective, TrainConfig};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Double-double number `hi + lo` for extended-precision reference values.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = two_sum(s, e);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        Dd::from(q1).add(Dd::from(q2)).add(Dd::from(q3))
    }

    pub fn sqrt(self) -> Dd {
        let x = self.hi.sqrt();
        // One Newton step: x + (a - x^2) / (2x)
        let r = self.sub(Dd::from(x).mul(Dd::from(x)));
        Dd::from(x).add(Dd::from(r.hi / (2.0 * x)))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Extended-precision schedule quantities from the f64 betas alone.
pub struct DdSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<Dd>,
}

impl DdSchedule {
    pub fn new(betas: &[f64]) -> Self {
        let mut acc = Dd::from(1.0);
        let mut alpha_bars = Vec::with_capacity(betas.len());
        for &b in betas {
            acc = acc.mul(Dd::from(1.0).sub(Dd::from(b)));
            alpha_bars.push(acc);
        }
        Self {
            betas: betas.to_vec(),
            alpha_bars,
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Dd {
        if t == 0 {
            Dd::from(1.0)
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> Dd {
        Dd::from(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Dd {
        Dd::from(1.0).sub(self.beta(t))
    }

    pub fn posterior_var(&self, t: usize) -> Dd {
        let one = Dd::from(1.0);
        one.sub(self.alpha_bar(t - 1))
            .div(one.sub(self.alpha_bar(t)))
            .mul(self.beta(t))
    }

    pub fn posterior_mean(&self, w0: &[f64], wt: &[f64], t: usize) -> Vec<f64> {
        let one = Dd::from(1.0);
        let denom = one.sub(self.alpha_bar(t));
        let c0 = self.alpha_bar(t - 1).sqrt().mul(self.beta(t)).div(denom);
        let ct = self.alpha(t).sqrt().mul(one.sub(self.alpha_bar(t - 1))).div(denom);
        w0.iter()
            .zip(wt)
            .map(|(&a, &b)| c0.mul(Dd::from(a)).add(ct.mul(Dd::from(b))).to_f64())
            .collect()
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of `f` around `params[i]`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(params: &mut Vec<f64>, i: usize, h: f64, mut f: F) -> f64 {
    let orig = params[i];
    params[i] = orig + h;
    let up = f(params);
    params[i] = orig - h;
    let down = f(params);
    params[i] = orig;
    (up - down) / (2.0 * h)
}

/// Mean and unbiased variance of the forward chain run one step at a time from `w0`,
/// recorded at each checkpoint `t`.
pub fn stepwise_marginal(s: &NoiseSchedule, w0: f64, n: usize, seed: u64, checkpoints: &[usize]) -> Vec<(usize, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tmax = *checkpoints.iter().max().unwrap();
    let mut sums = vec![(0.0f64, 0.0f64); checkpoints.len()];
    for _ in 0..n {
        let mut w = w0;
        for t in 1..=tmax {
            let z: f64 = StandardNormal.sample(&mut rng);
            w = (1.0 - s.beta(t)).sqrt() * w + s.beta(t).sqrt() * z;
            if let Some(i) = checkpoints.iter().position(|&c| c == t) {
                sums[i].0 += w;
                sums[i].1 += w * w;
            }
        }
    }
    checkpoints
        .iter()
        .zip(sums)
        .map(|(&t, (s1, s2))| {
            let mean = s1 / n as f64;
            let var = (s2 - n as f64 * mean * mean) / (n as f64 - 1.0);
            (t, mean, var)
        })
        .collect()
}

pub const OBJECTIVES: [Objective; 4] = [Objective::Diffusion, Objective::ViewL2, Objective::Triplet, Objective::Total];

/// Worst relative error between analytic gradients and a five-point central
/// difference (h = 3e-4) for each objective, over `per_entry` sampled
/// parameters of every tensor. The absolute floor is `1e-6 * max(1, |f|)`.
/// Returns `(objective, worst, checked)`.
pub fn grad_check(kind: ParamKind, margin: f64, per_entry: usize, seed: u64) -> Vec<(Objective, f64, usize)> {
    let mut cfg = TrainConfig {
        batch_identities: 4,
        views: 3,
        prior: PriorConfig {
            param_kind: kind,
            cond_dropout_prob: 0.2,
            ..PriorConfig::desk()
        },
        ..TrainConfig::desk()
    };
    cfg.weights.margin = margin;
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    let ds = generate_dataset(&world, 8, 4, 1, serde_json::Value::Null).unwrap();
    let sched = cfg.schedule.build().unwrap();
    let plan = plan_step(&ds, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let net = PriorNetwork::new(cfg.prior.clone(), &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
    let grads: Vec<Vec<f64>> = OBJECTIVES
        .iter()
        .map(|&o| evaluate_plan(&net, &plan, &sched, &cfg.weights, Some(o)).unwrap().1.unwrap())
        .collect();

    let (base, _) = evaluate_plan(&net, &plan, &sched, &cfg.weights, None).unwrap();
    let floors = [base.l_diff, base.l_2, base.l_tri, base.l_total].map(|f| 1e-6 * f.abs().max(1.0));

    let mut params = net.params().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut worst = [0.0f64; 4];
    let mut checked = 0;
    for entry in net.layout().entries() {
        let picks = index::sample(&mut rng, entry.len(), entry.len().min(per_entry)).into_vec();
        for off in picks {
            let i = entry.offset + off;
            let h = 3e-4;
            let eval = |p: &[f64]| {
                let n = PriorNetwork::from_params(cfg.prior.clone(), p.to_vec()).unwrap();
                let (r, _) = evaluate_plan(&n, &plan, &sched, &cfg.weights, None).unwrap();
                [r.l_diff, r.l_2, r.l_tri, r.l_total]
            };
            let orig = params[i];
            let mut at = |d: f64| {
                params[i] = orig + d;
                let v = eval(&params);
                params[i] = orig;
                v
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            for k in 0..4 {
                let fd = (8.0 * (p1[k] - m1[k]) - (p2[k] - m2[k])) / (12.0 * h);
                worst[k] = worst[k].max(rel_err(grads[k][i], fd, floors[k]));
            }
            checked += 1;
        }
    }
    OBJECTIVES.iter().zip(worst).map(|(&o, w)| (o, w, checked)).collect()
}
