//! Losses against brute-force and extended-precision accumulations.

mod common;

use clfusion::losses::{
    diffusion_loss, l2_view_loss, total_loss, triplet_distances, triplet_loss, LossParts, LossWeights,
};
use common::Dd;
use proptest::prelude::*;

fn brute_l2(preds: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..preds.len() {
        for j in 0..preds.len() {
            if i < j {
                let mut d = 0.0;
                for c in 0..preds[i].len() {
                    d += (preds[i][c] - preds[j][c]) * (preds[i][c] - preds[j][c]);
                }
                sum += d;
                pairs += 1;
            }
        }
    }
    sum / pairs as f64
}

fn dd_sq_sum(a: &[f64], b: &[f64]) -> Dd {
    a.iter().zip(b).fold(Dd::from(0.0), |acc, (&x, &y)| {
        let d = Dd::from(x).sub(Dd::from(y));
        acc.add(d.mul(d))
    })
}

fn views(k: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), k)
}

proptest! {
    #[test]
    fn l2_matches_pairwise_loop_exactly(v in (2usize..=8, 1usize..=8).prop_flat_map(|(k, d)| views(k, d))) {
        let refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(l2_view_loss(&refs).unwrap(), brute_l2(&v));
    }

    #[test]
    fn diffusion_loss_matches_extended_accumulation(
        (p, t) in (1usize..64).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n)))
    ) {
        let oracle = dd_sq_sum(&p, &t).div(Dd::from(p.len() as f64)).to_f64();
        let got = diffusion_loss(&p, &t).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-13 * oracle.abs().max(1e-300));
    }

    #[test]
    fn triplet_distances_match_extended_accumulation(v in views(3, 16)) {
        let (dp, dn) = triplet_distances(&v[0], &v[1], &v[2]).unwrap();
        let op = dd_sq_sum(&v[0], &v[1]).sqrt().to_f64();
        let on = dd_sq_sum(&v[0], &v[2]).sqrt().to_f64();
        prop_assert!((dp - op).abs() <= 1e-13 * op.max(1e-300));
        prop_assert!((dn - on).abs() <= 1e-13 * on.max(1e-300));
    }

    #[test]
    fn triplet_monotonicity(dp in 0.0f64..5.0, dn in 0.0f64..5.0, delta in 0.0f64..1.0, m in 0.01f64..2.0) {
        let base = triplet_loss(dp, dn, m).unwrap();
        prop_assert!(triplet_loss(dp, dn + delta, m).unwrap() <= base);
        prop_assert!(triplet_loss(dp + delta, dn, m).unwrap() >= base);
    }

    #[test]
    fn homogeneity(v in views(4, 5), c in -3.0f64..3.0) {
        let scaled: Vec<Vec<f64>> = v.iter().map(|p| p.iter().map(|x| c * x).collect()).collect();
        let a: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        let l = l2_view_loss(&a).unwrap();
        prop_assert!((l2_view_loss(&b).unwrap() - c * c * l).abs() <= 1e-10 * (1.0 + c * c * l));
        let (dp, dn) = triplet_distances(a[0], a[1], a[2]).unwrap();
        let (sp, sn) = triplet_distances(b[0], b[1], b[2]).unwrap();
        prop_assert!((sp - c.abs() * dp).abs() <= 1e-10 * (1.0 + dp));
        prop_assert!((sn - c.abs() * dn).abs() <= 1e-10 * (1.0 + dn));
    }
}

#[test]
fn triplet_hand_cases() {
    assert_eq!(triplet_loss(0.2, 0.9, 0.5).unwrap(), 0.0);
    assert!((triplet_loss(0.8, 0.3, 0.5).unwrap() - 1.0).abs() < 1e-15);
    for d in [0.0, 0.7, 3.0] {
        assert_eq!(triplet_loss(d, d, 0.5).unwrap(), 0.5);
    }
    assert!(triplet_loss(-0.1, 1.0, 0.5).is_err());
}

#[test]
fn total_loss_identities() {
    let w = LossWeights::default();
    assert_eq!((w.lambda_diff, w.lambda_contrast), (1.0, 1.0));
    let r = total_loss(LossParts { l_diff: 0.4, l_2: 0.1, l_tri: 0.2 }, &w).unwrap();
    assert!((r.l_contrast - 0.3).abs() < 1e-15);
    assert!((r.l_total - 0.7).abs() < 1e-15);
    let r = total_loss(
        LossParts { l_diff: 0.4, l_2: 0.1, l_tri: 0.2 },
        &LossWeights { lambda_contrast: 0.0, ..w },
    )
    .unwrap();
    assert_eq!(r.l_total, 0.4);
    let r = total_loss(LossParts::default(), &w).unwrap();
    assert_eq!((r.l_diff, r.l_2, r.l_tri, r.l_contrast, r.l_total), (0.0, 0.0, 0.0, 0.0, 0.0));
}
