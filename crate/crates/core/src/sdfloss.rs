//! Level-set training loss: a delta-weighted distance term concentrated on
//! the predicted zero set plus an eikonal penalty, with its exact gradient
//! with respect to the predicted grid.

use serde::{Deserialize, Serialize};

use crate::sdfgrid::{central_gradient, eikonal_mask, GridGeometry, SdfGrid};
use crate::{Error, Result};

/// Guard on the distance sum before taking its `1/p` power.
const SUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaKind {
    /// `eps / (pi (x^2 + eps^2))`
    Poisson,
    /// `(1 + cos(pi x / eps)) / (2 eps)` on `|x| <= eps`, zero outside.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub p: u32,
    pub alpha: f64,
    pub delta_kind: DeltaKind,
    /// When set, the eikonal sum skips voxels dropped by
    /// [`eikonal_mask`] of the ground truth at this band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eikonal_mask_band: Option<f64>,
}

impl LossConfig {
    /// Defaults for an `m`-voxel unit-box lattice: `eps = 1.5 h`, `p = 2`, `alpha = 0.01`.
    pub fn for_resolution(m: usize) -> Self {
        LossConfig {
            epsilon: 1.5 / m as f64,
            p: 2,
            alpha: 0.01,
            delta_kind: DeltaKind::Poisson,
            eikonal_mask_band: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !matches!(self.p, 1 | 2) {
            return Err(Error::OutOfRange(format!(
                "p must be 1 or 2, got {}",
                self.p
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if let Some(b) = self.eikonal_mask_band {
            if !(b >= 0.0) {
                return Err(Error::OutOfRange(format!(
                    "mask band must be nonnegative, got {b}"
                )));
            }
        }
        Ok(())
    }

    pub fn delta(&self, x: f64) -> f64 {
        delta_eps(x, self.epsilon, self.delta_kind)
    }

    pub fn delta_derivative(&self, x: f64) -> f64 {
        let e = self.epsilon;
        match self.delta_kind {
            DeltaKind::Poisson => {
                let q = x * x + e * e;
                -2.0 * e * x / (std::f64::consts::PI * q * q)
            }
            DeltaKind::Cosine => {
                if x.abs() > e {
                    0.0
                } else {
                    let w = std::f64::consts::PI / e;
                    -w * (w * x).sin() / (2.0 * e)
                }
            }
        }
    }
}

/// Smoothed Dirac delta of width `eps`.
pub fn delta_eps(x: f64, eps: f64, kind: DeltaKind) -> f64 {
    match kind {
        DeltaKind::Poisson => eps / (std::f64::consts::PI * (x * x + eps * eps)),
        DeltaKind::Cosine => {
            if x.abs() > eps {
                0.0
            } else {
                (1.0 + (std::f64::consts::PI * x / eps).cos()) / (2.0 * eps)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// `(sum delta(pred) d^p)^(1/p)`
    pub distance: f64,
    /// Unweighted `sum (|grad pred| - 1)^2`.
    pub eikonal: f64,
    /// `distance + alpha * eikonal`
    pub total: f64,
}

fn check_pair(pred: &SdfGrid, truth: &SdfGrid) -> Result<()> {
    if pred.resolution() != truth.resolution() {
        return Err(Error::DimensionMismatch {
            expected: truth.resolution(),
            got: pred.resolution(),
        });
    }
    if !pred.is_finite() {
        return Err(Error::NonFinite("predicted grid".into()));
    }
    if !truth.is_finite() {
        return Err(Error::NonFinite("ground-truth grid".into()));
    }
    Ok(())
}

/// Mask implied by `cfg` for a ground truth, if any.
pub fn loss_mask(truth: &SdfGrid, cfg: &LossConfig) -> Option<Vec<bool>> {
    cfg.eikonal_mask_band.map(|b| eikonal_mask(truth, b))
}

pub fn sdf_loss(pred: &SdfGrid, truth: &SdfGrid, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    check_pair(pred, truth)?;
    let mask = loss_mask(truth, cfg);
    Ok(evaluate(
        &pred.values,
        &truth.values,
        &pred.geometry,
        cfg,
        mask.as_deref(),
        None,
    ))
}

/// Loss and `dL/dpred`.
pub fn sdf_loss_grad(
    pred: &SdfGrid,
    truth: &SdfGrid,
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    cfg.validate()?;
    check_pair(pred, truth)?;
    let mask = loss_mask(truth, cfg);
    let mut grad = vec![0.0; pred.values.len()];
    let terms = evaluate(
        &pred.values,
        &truth.values,
        &pred.geometry,
        cfg,
        mask.as_deref(),
        Some(&mut grad),
    );
    Ok((terms, grad))
}

/// Raw-slice kernel. When `grad` is given it is overwritten with `dL/dpred`.
pub fn evaluate(
    pred: &[f64],
    truth: &[f64],
    geometry: &GridGeometry,
    cfg: &LossConfig,
    mask: Option<&[bool]>,
    grad: Option<&mut [f64]>,
) -> LossTerms {
    let p = cfg.p as i32;
    let mut sum = 0.0;
    for (&x, &t) in pred.iter().zip(truth) {
        sum += cfg.delta(x) * t.abs().powi(p);
    }
    let distance = if p == 1 { sum } else { sum.max(0.0).sqrt() };

    let m = geometry.resolution;
    let h = geometry.spacing;
    let mut eikonal = 0.0;
    let want_grad = grad.is_some();
    let mut eik_grad = if want_grad && cfg.alpha > 0.0 {
        vec![0.0; pred.len()]
    } else {
        Vec::new()
    };
    for idx in 0..pred.len() {
        if mask.is_some_and(|k| !k[idx]) {
            continue;
        }
        let (i, j, k) = geometry.coords(idx);
        let g = central_gradient(pred, geometry, i, j, k);
        let norm = g.norm();
        let r = norm - 1.0;
        eikonal += r * r;
        if eik_grad.is_empty() || norm == 0.0 {
            continue;
        }
        let c = [i, j, k];
        for axis in 0..3 {
            if m < 2 {
                break;
            }
            let (lo, hi, steps) = if c[axis] == 0 {
                (0, 1, 1.0)
            } else if c[axis] == m - 1 {
                (m - 2, m - 1, 1.0)
            } else {
                (c[axis] - 1, c[axis] + 1, 2.0)
            };
            let coeff = 2.0 * r * g[axis] / norm / (steps * h);
            let mut at = c;
            at[axis] = hi;
            eik_grad[geometry.index(at[0], at[1], at[2])] += coeff;
            at[axis] = lo;
            eik_grad[geometry.index(at[0], at[1], at[2])] -= coeff;
        }
    }

    if let Some(grad) = grad {
        let outer = if p == 1 {
            1.0
        } else {
            0.5 / sum.max(SUM_FLOOR).sqrt()
        };
        for (idx, gout) in grad.iter_mut().enumerate() {
            let d = truth[idx].abs().powi(p);
            let mut v = outer * cfg.delta_derivative(pred[idx]) * d;
            if !eik_grad.is_empty() {
                v += cfg.alpha * eik_grad[idx];
            }
            *gout = v;
        }
    }
    LossTerms {
        distance,
        eikonal,
        total: distance + cfg.alpha * eikonal,
    }
}
