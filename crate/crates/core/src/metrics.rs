//! Reconstruction metrics: volumetric IoU, symmetric Chamfer distance,
//! normal consistency and F-score.

use serde::{Deserialize, Serialize};

use crate::mesh::{sample_surface, SurfaceSample, TriangleMesh};
use crate::sdfgrid::{compute_sdf_on, occupancy, SdfGrid};
use crate::spatial::KdTree;
use crate::surface::{marching_cubes, surface_points};
use crate::{Error, Result, Vec3};

/// Chamfer distance reported for an empty predicted surface: the diagonal
/// of the unit box, an upper bound for any two sets inside it.
pub const EMPTY_CHAMFER: f64 = 1.732_050_807_568_877_2;

/// Default F-score threshold in world units.
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub chamfer: f64,
    pub normal_consistency: f64,
    pub fscore: f64,
    pub tau: f64,
    pub n_points: usize,
    /// Set when the prediction had no surface; the surface metrics then
    /// hold worst-case sentinels.
    pub empty_prediction: bool,
}

/// `|a and b| / |a or b|`, 1 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn nonempty(p: usize, q: usize) -> Result<()> {
    if p == 0 || q == 0 {
        return Err(Error::Invalid("point sets must be nonempty".into()));
    }
    Ok(())
}

/// Nearest neighbour in `to` of every point of `from`: `(index, distance)`.
fn nearest_all(from: &[Vec3], to: &KdTree) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let (i, d2) = to.nearest(p).expect("nonempty tree");
            (i, d2.sqrt())
        })
        .collect()
}

struct Pairing {
    p_to_q: Vec<(usize, f64)>,
    q_to_p: Vec<(usize, f64)>,
}

impl Pairing {
    fn new(p: &[Vec3], q: &[Vec3]) -> Self {
        Pairing {
            p_to_q: nearest_all(p, &KdTree::build(q)),
            q_to_p: nearest_all(q, &KdTree::build(p)),
        }
    }

    fn chamfer(&self) -> f64 {
        let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
        0.5 * mean(&self.p_to_q) + 0.5 * mean(&self.q_to_p)
    }

    fn fscore(&self, tau: f64) -> f64 {
        let frac =
            |v: &[(usize, f64)]| v.iter().filter(|x| x.1 <= tau).count() as f64 / v.len() as f64;
        let precision = frac(&self.q_to_p);
        let recall = frac(&self.p_to_q);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    fn normal_consistency(&self, p: &[SurfaceSample], q: &[SurfaceSample]) -> f64 {
        let side = |from: &[SurfaceSample], to: &[SurfaceSample], nn: &[(usize, f64)]| {
            from.iter()
                .zip(nn)
                .map(|(s, &(j, _))| s.normal.dot(&to[j].normal).abs())
                .sum::<f64>()
                / from.len() as f64
        };
        0.5 * side(p, q, &self.p_to_q) + 0.5 * side(q, p, &self.q_to_p)
    }
}

/// Symmetric mean of unsquared nearest-neighbour distances.
pub fn chamfer(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    nonempty(p.len(), q.len())?;
    Ok(Pairing::new(p, q).chamfer())
}

fn check_normals(s: &[SurfaceSample]) -> Result<()> {
    if let Some(i) = s.iter().position(|x| !(x.normal.norm() > 1e-12)) {
        return Err(Error::Invalid(format!(
            "sample {i} has a zero-length normal"
        )));
    }
    Ok(())
}

fn points(s: &[SurfaceSample]) -> Vec<Vec3> {
    s.iter().map(|x| x.point).collect()
}

/// Symmetric mean of `|n_p . n_nn(p)|`.
pub fn normal_consistency(p: &[SurfaceSample], q: &[SurfaceSample]) -> Result<f64> {
    nonempty(p.len(), q.len())?;
    check_normals(p)?;
    check_normals(q)?;
    Ok(Pairing::new(&points(p), &points(q)).normal_consistency(p, q))
}

/// Harmonic mean of precision (predicted within `tau` of truth) and recall.
pub fn fscore(truth: &[Vec3], pred: &[Vec3], tau: f64) -> Result<f64> {
    nonempty(truth.len(), pred.len())?;
    if !(tau > 0.0) {
        return Err(Error::OutOfRange(format!(
            "tau must be positive, got {tau}"
        )));
    }
    Ok(Pairing::new(truth, pred).fscore(tau))
}

/// Ground truth prepared once for repeated evaluation.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub occupancy: Vec<bool>,
    pub samples: Vec<SurfaceSample>,
}

impl GroundTruth {
    /// Occupancy from `truth_grid`, surface samples from `mesh`.
    pub fn new(
        mesh: &TriangleMesh,
        truth_grid: &SdfGrid,
        n_points: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(GroundTruth {
            occupancy: occupancy(truth_grid),
            samples: sample_surface(mesh, n_points, seed)?,
        })
    }
}

/// Scores a predicted grid against prepared ground truth.
pub fn evaluate_against(
    pred: &SdfGrid,
    gt: &GroundTruth,
    tau: f64,
    seed: u64,
) -> Result<EvalReport> {
    if !(tau > 0.0) {
        return Err(Error::OutOfRange(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let n_points = gt.samples.len();
    let iou = iou(&occupancy(pred), &gt.occupancy)?;
    let surface = marching_cubes(pred, 0.0);
    if surface.empty || n_points == 0 {
        return Ok(EvalReport {
            iou,
            chamfer: EMPTY_CHAMFER,
            normal_consistency: 0.0,
            fscore: 0.0,
            tau,
            n_points,
            empty_prediction: true,
        });
    }
    let pred_samples = surface_points(&surface, n_points, seed.wrapping_add(1))?;
    let pairing = Pairing::new(&points(&gt.samples), &points(&pred_samples));
    Ok(EvalReport {
        iou,
        chamfer: pairing.chamfer(),
        normal_consistency: pairing.normal_consistency(&gt.samples, &pred_samples),
        fscore: pairing.fscore(tau),
        tau,
        n_points,
        empty_prediction: false,
    })
}

/// End-to-end evaluation. The ground-truth occupancy is computed from the
/// mesh on the prediction's lattice; ground-truth samples use `seed` and
/// predicted samples use `seed + 1`.
pub fn evaluate(
    pred: &SdfGrid,
    gt_mesh: &TriangleMesh,
    n_points: usize,
    tau: f64,
    seed: u64,
) -> Result<EvalReport> {
    let truth = compute_sdf_on(gt_mesh, pred.geometry)?;
    let gt = GroundTruth::new(gt_mesh, &truth, n_points, seed)?;
    evaluate_against(pred, &gt, tau, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = vec![true, true, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(iou(&[true], &[true, false]).is_err());
    }

    #[test]
    fn chamfer_single_pair() {
        let p = [Vec3::zeros()];
        let q = [Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer(&p, &q).unwrap(), 1.0);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert!(chamfer(&p, &[]).is_err());
    }

    #[test]
    fn fscore_line() {
        let p: Vec<Vec3> = (0..10)
            .map(|i| Vec3::new(0.1 * i as f64, 0.0, 0.0))
            .collect();
        let q: Vec<Vec3> = p.iter().map(|v| v + Vec3::new(0.05, 0.0, 0.0)).collect();
        assert_eq!(fscore(&p, &q, 0.06).unwrap(), 1.0);
        assert_eq!(fscore(&p, &q, 0.04).unwrap(), 0.0);
        assert!(fscore(&p, &q, 0.0).is_err());
    }

    #[test]
    fn normal_consistency_orthogonal() {
        let s = |n: Vec3| SurfaceSample {
            point: Vec3::zeros(),
            normal: n,
        };
        let a = [s(Vec3::x())];
        let b = [s(Vec3::y())];
        assert_eq!(normal_consistency(&a, &a).unwrap(), 1.0);
        assert_eq!(normal_consistency(&a, &b).unwrap(), 0.0);
        assert!(normal_consistency(&a, &[s(Vec3::zeros())]).is_err());
    }
}
