mod common;

use common::{random_grid, rng};
use eigensdf::finetune::decoder_gradient;
use eigensdf::pca::{EigenBasis, LatentCode};
use eigensdf::sdfgrid::{analytic_sdf, AnalyticShape, GridGeometry, SdfGrid};
use eigensdf::sdfloss::{delta_eps, sdf_loss, sdf_loss_grad, DeltaKind, LossConfig};
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-4;

fn cfg(alpha: f64, p: u32) -> LossConfig {
    LossConfig {
        alpha,
        p,
        ..LossConfig::for_resolution(8)
    }
}

/// Relative error with the denominator floored at 1% of the largest
/// gradient entry, so near-cancelling entries do not expose the O(step^2)
/// truncation of the stencil.
fn rel_err(a: f64, b: f64, gmax: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2 * gmax).max(1e-300)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Finite differences of the total loss at 100 random voxels.
fn max_fd_error(pred: &SdfGrid, truth: &SdfGrid, c: &LossConfig, seed: u64) -> f64 {
    let (_, grad) = sdf_loss_grad(pred, truth, c).unwrap();
    let gmax = max_abs(&grad);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let idx = r.random_range(0..pred.values.len());
        let mut plus = pred.clone();
        plus.values[idx] += STEP;
        let mut minus = pred.clone();
        minus.values[idx] -= STEP;
        let fd = (sdf_loss(&plus, truth, c).unwrap().total
            - sdf_loss(&minus, truth, c).unwrap().total)
            / (2.0 * STEP);
        worst = worst.max(rel_err(grad[idx], fd, gmax));
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for &alpha in &[0.0, 0.01, 1.0] {
        for &p in &[1, 2] {
            for seed in 0..3 {
                let pred = random_grid(8, 0.3, seed);
                let truth = random_grid(8, 0.3, seed + 100);
                let err = max_fd_error(&pred, &truth, &cfg(alpha, p), seed);
                assert!(err < 1e-4, "alpha {alpha} p {p} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn each_term_matches_finite_differences() {
    let pred = random_grid(8, 0.3, 7);
    let truth = random_grid(8, 0.3, 8);
    let distance_only = cfg(0.0, 2);
    assert!(max_fd_error(&pred, &truth, &distance_only, 1) < 1e-4);
    // eikonal only: a zero ground truth makes the distance term vanish
    let zero = SdfGrid::constant(truth.geometry, 0.0);
    assert!(max_fd_error(&pred, &zero, &cfg(1.0, 2), 2) < 1e-4);
}

#[test]
fn masked_gradient_matches_finite_differences() {
    let pred = random_grid(8, 0.3, 3);
    let truth = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, 8);
    let c = LossConfig {
        eikonal_mask_band: Some(0.0),
        ..cfg(1.0, 2)
    };
    assert!(max_fd_error(&pred, &truth, &c, 4) < 1e-4);
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    let g = GridGeometry::unit_box(8);
    let truth = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, 8);
    let n = g.len();
    let mut r = rng(5);
    let basis = EigenBasis {
        geometry: g,
        mean: truth
            .values
            .iter()
            .map(|v| v + r.random_range(-0.05..0.05))
            .collect(),
        components: (0..n).map(|_| r.random_range(-0.05..0.05)).collect(),
        eigenvalues: vec![1.0],
        finetuned: false,
        total_variance: None,
        samples: 1,
    };
    let code = LatentCode(vec![0.7]);
    for &alpha in &[0.0, 0.01, 1.0] {
        for &p in &[1, 2] {
            let c = cfg(alpha, p);
            let (_, grad_e, grad_mu) = decoder_gradient(&basis, &code, &truth, &c).unwrap();
            let (gmax_e, gmax_mu) = (max_abs(&grad_e), max_abs(&grad_mu));
            let loss_at = |b: &EigenBasis| {
                sdf_loss(&b.decode(&code).unwrap(), &truth, &c)
                    .unwrap()
                    .total
            };
            for _ in 0..50 {
                let idx = r.random_range(0..n);
                let (mut plus, mut minus) = (basis.clone(), basis.clone());
                plus.components[idx] += STEP;
                minus.components[idx] -= STEP;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
                assert!(
                    rel_err(grad_e[idx], fd, gmax_e) < 1e-4,
                    "dE alpha {alpha} p {p}"
                );
                let (mut plus, mut minus) = (basis.clone(), basis.clone());
                plus.mean[idx] += STEP;
                minus.mean[idx] -= STEP;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
                assert!(
                    rel_err(grad_mu[idx], fd, gmax_mu) < 1e-4,
                    "dmu alpha {alpha} p {p}"
                );
            }
        }
    }
}

#[test]
fn delta_examples() {
    let eps = 0.05;
    let peak = delta_eps(0.0, eps, DeltaKind::Poisson);
    assert!((peak - 1.0 / (std::f64::consts::PI * eps)).abs() < 1e-12);
    for x in [eps, -eps] {
        assert!((delta_eps(x, eps, DeltaKind::Poisson) - peak / 2.0).abs() < 1e-12);
    }
    // midpoint quadrature over a range wide enough for the Cauchy tails
    let (lo, hi, steps) = (-2000.0 * eps, 2000.0 * eps, 4_000_000);
    let dx = (hi - lo) / steps as f64;
    let integral: f64 = (0..steps)
        .map(|i| delta_eps(lo + (i as f64 + 0.5) * dx, eps, DeltaKind::Poisson) * dx)
        .sum();
    assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    let cos_integral: f64 = (0..10_000)
        .map(|i| {
            delta_eps(
                -eps + (i as f64 + 0.5) * 2.0 * eps / 1e4,
                eps,
                DeltaKind::Cosine,
            ) * 2.0
                * eps
                / 1e4
        })
        .sum();
    assert!((cos_integral - 1.0).abs() < 1e-6);
}

#[test]
fn identical_sphere_has_small_loss() {
    let m = 16;
    let truth = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, m);
    let c = LossConfig::for_resolution(m);
    let terms = sdf_loss(&truth, &truth, &c).unwrap();
    // oracle: sum over voxels of delta(phi) * phi^2, evaluated directly
    let direct: f64 = truth
        .values
        .iter()
        .map(|&v| c.delta(v) * v * v)
        .sum::<f64>()
        .sqrt();
    assert!((terms.distance - direct).abs() < 1e-12);
    // with a compact kernel only the band contributes, each voxel at most eps
    let compact = LossConfig {
        delta_kind: DeltaKind::Cosine,
        ..c
    };
    let band = truth.values.iter().filter(|v| v.abs() <= c.epsilon).count();
    let bound = (band as f64 * c.epsilon).sqrt();
    assert!(sdf_loss(&truth, &truth, &compact).unwrap().distance <= bound);
    // the exact field is distorted only near the center and at the box boundary
    assert!(c.alpha * terms.eikonal < c.alpha * (m * m * m) as f64 * 1e-2);
}

#[test]
fn distance_term_collapses_under_large_shifts() {
    let truth = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, 8);
    let c = cfg(0.0, 2);
    let shift = |s: f64| {
        let pred = SdfGrid::from_fn(truth.geometry, |p| 0.3 - p.norm() + s);
        sdf_loss(&pred, &truth, &c).unwrap().distance
    };
    let e = c.epsilon;
    let (a, b, d) = (shift(2.0 * e), shift(4.0 * e), shift(8.0 * e));
    assert!(a > b && b > d, "{a} {b} {d}");
    assert!(shift(10.0 * e) < shift(0.5 * e));
}

#[test]
fn gradient_vanishes_on_exact_data() {
    let truth = random_grid(8, 0.3, 9);
    let zero = SdfGrid::constant(truth.geometry, 0.0);
    let (_, g) = sdf_loss_grad(&truth, &zero, &cfg(0.0, 2)).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    // eikonal only on a unit ramp: zero gradient away from the boundary
    let ramp = SdfGrid::from_fn(GridGeometry::unit_box(8), |p| p.x);
    let (terms, g) = sdf_loss_grad(&ramp, &zero, &cfg(1.0, 2)).unwrap();
    assert!(terms.eikonal < 1e-20);
    assert!(g.iter().all(|&v| v.abs() < 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_is_even_and_peaked(x in 1e-6f64..1.0, y in 1e-6f64..1.0, eps in 0.01f64..0.2) {
        for kind in [DeltaKind::Poisson, DeltaKind::Cosine] {
            prop_assert_eq!(delta_eps(x, eps, kind), delta_eps(-x, eps, kind));
            prop_assert!(delta_eps(0.0, eps, kind) >= delta_eps(x, eps, kind));
        }
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        prop_assume!(b - a > 1e-9);
        prop_assert!(delta_eps(a, eps, DeltaKind::Poisson) > delta_eps(b, eps, DeltaKind::Poisson));
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..500, alpha in 0.0f64..2.0, p in 1u32..=2) {
        let pred = random_grid(6, 0.4, seed);
        let truth = random_grid(6, 0.4, seed + 1);
        let t = sdf_loss(&pred, &truth, &cfg(alpha, p)).unwrap();
        prop_assert!(t.distance >= 0.0 && t.eikonal >= 0.0 && t.total >= 0.0);
    }
}
