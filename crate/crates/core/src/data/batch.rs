use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CondEmbedding, Dataset};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// One identity in a batch: every view shares `t`, `eps` and `wt`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGroup {
    pub identity_id: usize,
    pub w0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub wt: Vec<f64>,
    pub views: Vec<CondEmbedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub groups: Vec<BatchGroup>,
}

impl TrainingBatch {
    /// Total number of (identity, view) rows.
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.views.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `n_identities` distinct identities, `k` of their views, and one
/// `(t, eps)` pair per identity with `t` uniform on `[1, T]`.
pub fn make_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    n_identities: usize,
    k: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if n_identities == 0 || k == 0 {
        return Err(Error::contract("batch needs at least one identity and one view"));
    }
    if dataset.len() < n_identities {
        return Err(Error::contract(format!(
            "dataset holds {} identities, batch needs {n_identities}",
            dataset.len()
        )));
    }
    let available = dataset.header.views_per_identity;
    if available < k {
        return Err(Error::contract(format!(
            "dataset has {available} views per identity, batch needs {k}"
        )));
    }

    let picks = index::sample(rng, dataset.len(), n_identities).into_vec();
    let mut groups = Vec::with_capacity(n_identities);
    for id in picks {
        let ident = &dataset.identities[id];
        let view_idx: Vec<usize> = if k == available {
            (0..k).collect()
        } else {
            let mut v = index::sample(rng, available, k).into_vec();
            v.sort_unstable();
            v
        };
        let t = rng.random_range(1..=sched.steps());
        let eps: Vec<f64> = (0..ident.w0.len()).map(|_| StandardNormal.sample(rng)).collect();
        let wt = sched.q_sample(&ident.w0, t, &eps)?;
        groups.push(BatchGroup {
            identity_id: ident.identity_id,
            w0: ident.w0.clone(),
            t,
            eps,
            wt,
            views: view_idx.iter().map(|&v| ident.views[v].embedding.clone()).collect(),
        });
    }
    Ok(TrainingBatch { groups })
}
