//! Training objectives and their gradients with respect to predictions.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_diff: f64,
    pub lambda_contrast: f64,
    pub margin: f64,
    /// Ablation switch for the view-pair L2 term.
    pub use_l2: bool,
    /// Ablation switch for the triplet term.
    pub use_triplet: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_diff: 1.0,
            lambda_contrast: 1.0,
            margin: 0.5,
            use_l2: true,
            use_triplet: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_diff >= 0.0 && self.lambda_diff.is_finite()) {
            return Err(Error::param("lambda_diff", "must be finite and >= 0"));
        }
        if !(self.lambda_contrast >= 0.0 && self.lambda_contrast.is_finite()) {
            return Err(Error::param("lambda_contrast", "must be finite and >= 0"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::param("margin", "must be > 0"));
        }
        Ok(())
    }

    pub fn contrast_active(&self) -> bool {
        self.lambda_contrast > 0.0 && (self.use_l2 || self.use_triplet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_diff: f64,
    pub l_2: f64,
    pub l_tri: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_diff: f64,
    pub l_2: f64,
    pub l_tri: f64,
    pub l_contrast: f64,
    pub l_total: f64,
}

/// Mean squared error over every element.
pub fn diffusion_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len("diffusion_loss", target.len(), pred.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sum / pred.len() as f64)
}

/// `d diffusion_loss / d pred`.
pub fn diffusion_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_len("diffusion_loss", target.len(), pred.len())?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_views(preds: &[&[f64]]) -> Result<usize> {
    if preds.len() < 2 {
        return Err(Error::contract(format!(
            "l2_view_loss needs at least 2 views, got {}",
            preds.len()
        )));
    }
    let dim = preds[0].len();
    for p in &preds[1..] {
        check_len("l2_view_loss", dim, p.len())?;
    }
    Ok(dim)
}

/// Mean over unordered view pairs of the squared L2 distance between
/// predictions made for one identity.
pub fn l2_view_loss(preds: &[&[f64]]) -> Result<f64> {
    check_views(preds)?;
    let k = preds.len();
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += sq_dist(preds[i], preds[j]);
        }
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

/// Gradient of [`l2_view_loss`] with respect to each view's prediction.
pub fn l2_view_loss_grad(preds: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let dim = check_views(preds)?;
    let k = preds.len();
    let pairs = (k * (k - 1) / 2) as f64;
    // d/dp_i sum_{j != i} |p_i - p_j|^2 = 2 (k p_i - sum_j p_j)
    let mut total = vec![0.0; dim];
    for p in preds {
        for (t, x) in total.iter_mut().zip(p.iter()) {
            *t += x;
        }
    }
    Ok(preds
        .iter()
        .map(|p| {
            p.iter()
                .zip(&total)
                .map(|(x, s)| 2.0 * (k as f64 * x - s) / pairs)
                .collect()
        })
        .collect())
}

/// Un-squared L2 distances `(|a - p|, |a - n|)`.
pub fn triplet_distances(anchor: &[f64], positive: &[f64], negative: &[f64]) -> Result<(f64, f64)> {
    check_len("triplet positive", anchor.len(), positive.len())?;
    check_len("triplet negative", anchor.len(), negative.len())?;
    Ok((sq_dist(anchor, positive).sqrt(), sq_dist(anchor, negative).sqrt()))
}

/// Hinge `max(0, m + d_pos - d_neg)`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> Result<f64> {
    if d_pos < 0.0 || d_neg < 0.0 {
        return Err(Error::contract(format!(
            "triplet distances must be non-negative, got ({d_pos}, {d_neg})"
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::param("margin", "must be > 0"));
    }
    Ok((margin + d_pos - d_neg).max(0.0))
}

/// Gradients of the triplet hinge with respect to `(anchor, positive, negative)`.
///
/// The zero branch is taken at the hinge itself; a zero distance contributes
/// a zero subgradient.
pub fn triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<(f64, [Vec<f64>; 3])> {
    let (d_pos, d_neg) = triplet_distances(anchor, positive, negative)?;
    let loss = triplet_loss(d_pos, d_neg, margin)?;
    let dim = anchor.len();
    let mut ga = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    if loss > 0.0 {
        if d_pos > 0.0 {
            for i in 0..dim {
                let u = (anchor[i] - positive[i]) / d_pos;
                ga[i] += u;
                gp[i] -= u;
            }
        }
        if d_neg > 0.0 {
            for i in 0..dim {
                let u = (anchor[i] - negative[i]) / d_neg;
                ga[i] -= u;
                gn[i] += u;
            }
        }
    }
    Ok((loss, [ga, gp, gn]))
}

/// Combines the terms: `l_contrast = l_2 + l_tri`,
/// `l_total = lambda_diff l_diff + lambda_contrast l_contrast`.
pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("l_diff", parts.l_diff), ("l_2", parts.l_2), ("l_tri", parts.l_tri)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    let l_contrast = parts.l_2 + parts.l_tri;
    Ok(LossReport {
        l_diff: parts.l_diff,
        l_2: parts.l_2,
        l_tri: parts.l_tri,
        l_contrast,
        l_total: weights.lambda_diff * parts.l_diff + weights.lambda_contrast * l_contrast,
    })
}
