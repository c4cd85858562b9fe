//! Eigen bases of flattened SDF grids, fitted by incremental PCA, and the
//! linear encode/decode pair that moves shapes in and out of latent space.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::sdfgrid::{ByteReader, GridGeometry, SdfGrid};
use crate::{Error, Result};

const BASIS_MAGIC: &[u8; 4] = b"EBAS";
const BASIS_VERSION: u32 = 1;

/// Coefficients of a shape in an [`EigenBasis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(k: usize) -> Self {
        LatentCode(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Voxels per decode tile.
const DECODE_TILE: usize = 2048;

/// Mean grid plus `k` component rows over `M^3` voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    pub geometry: GridGeometry,
    pub mean: Vec<f64>,
    /// Row-major `k x M^3`.
    pub components: Vec<f64>,
    /// Explained variance per component, population convention.
    pub eigenvalues: Vec<f64>,
    pub finetuned: bool,
    /// Total variance of the fitted data, when known.
    pub total_variance: Option<f64>,
    pub samples: usize,
}

impl EigenBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn resolution(&self) -> usize {
        self.geometry.resolution
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.components[i * n..(i + 1) * n]
    }

    fn check_grid(&self, grid: &SdfGrid) -> Result<()> {
        if grid.resolution() != self.resolution() {
            return Err(Error::DimensionMismatch {
                expected: self.resolution(),
                got: grid.resolution(),
            });
        }
        Ok(())
    }

    /// Projects `grid - mean` onto the component rows.
    pub fn encode(&self, grid: &SdfGrid) -> Result<LatentCode> {
        self.check_grid(grid)?;
        let centered: Vec<f64> = grid
            .values
            .iter()
            .zip(&self.mean)
            .map(|(g, m)| g - m)
            .collect();
        Ok(LatentCode(
            (0..self.k())
                .map(|i| dot(self.component(i), &centered))
                .collect(),
        ))
    }

    /// `mean + code * E`, on the basis geometry.
    pub fn decode(&self, code: &LatentCode) -> Result<SdfGrid> {
        if code.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: code.len(),
            });
        }
        let mut values = self.mean.clone();
        let n = values.len();
        // voxel tiles stay in L1 while every component streams past once
        for (t, tile) in values.chunks_mut(DECODE_TILE).enumerate() {
            let start = t * DECODE_TILE;
            for (i, &c) in code.0.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let row = &self.components[i * n + start..i * n + start + tile.len()];
                for (v, e) in tile.iter_mut().zip(row) {
                    *v += c * e;
                }
            }
        }
        Ok(SdfGrid {
            geometry: self.geometry,
            values,
        })
    }

    /// Keeps the leading `k` components.
    pub fn truncated(&self, k: usize) -> Result<EigenBasis> {
        if k == 0 || k > self.k() {
            return Err(Error::OutOfRange(format!(
                "cannot truncate a {}-component basis to {k}",
                self.k()
            )));
        }
        let mut out = self.clone();
        out.components.truncate(k * self.dim());
        out.eigenvalues.truncate(k);
        Ok(out)
    }

    /// Largest `|E E^T - I|` entry.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.k() {
            for j in i..self.k() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.component(i), self.component(j)) - target).abs());
            }
        }
        worst
    }

    /// Fraction of the total variance carried by the stored components.
    pub fn retained_variance(&self) -> Option<f64> {
        let total = self.total_variance?;
        (total > 0.0).then(|| self.eigenvalues.iter().sum::<f64>() / total)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(Error::Invalid("basis has no components".into()));
        }
        if self.mean.len() != self.geometry.len() || self.components.len() != self.k() * self.dim()
        {
            return Err(Error::Invalid("basis arrays are inconsistent".into()));
        }
        if !self
            .mean
            .iter()
            .chain(&self.components)
            .chain(&self.eigenvalues)
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("basis entries".into()));
        }
        if !self.finetuned {
            if self.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Invalid("eigenvalues are not descending".into()));
            }
            let err = self.orthonormality_error();
            if err > 1e-6 {
                return Err(Error::Invalid(format!(
                    "components are not orthonormal ({err:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            17 + 4 * (self.mean.len() + self.eigenvalues.len() + self.components.len()),
        );
        out.extend_from_slice(BASIS_MAGIC);
        out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.resolution() as u32).to_le_bytes());
        out.push(self.finetuned as u8);
        for v in self
            .mean
            .iter()
            .chain(&self.eigenvalues)
            .chain(&self.components)
        {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Decodes a basis file. The grid geometry is the unit-box lattice.
    pub fn from_bytes(bytes: &[u8]) -> Result<EigenBasis> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != BASIS_MAGIC {
            return Err(Error::Format("missing EBAS magic".into()));
        }
        let version = r.u32()?;
        if version != BASIS_VERSION {
            return Err(Error::Format(format!(
                "unsupported basis version {version}"
            )));
        }
        let k = r.u32()? as usize;
        let m = r.u32()? as usize;
        let finetuned = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad finetuned flag {b}"))),
        };
        if k == 0 || m == 0 {
            return Err(Error::Format(format!("empty basis header (k={k}, M={m})")));
        }
        let geometry = GridGeometry::unit_box(m);
        let n = geometry.len();
        let mean = r.f32_vec(n)?;
        let eigenvalues = r.f32_vec(k)?;
        let components = r.f32_vec(k * n)?;
        r.finish()?;
        Ok(EigenBasis {
            geometry,
            mean,
            components,
            eigenvalues,
            finetuned,
            total_variance: None,
            samples: 0,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<EigenBasis> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Mean squared voxel error of `decode(encode(g))` over `grids`.
    pub fn reconstruction_mse<'a>(
        &self,
        grids: impl IntoIterator<Item = &'a SdfGrid>,
    ) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for g in grids {
            let rec = self.decode(&self.encode(g)?)?;
            sum += g
                .values
                .iter()
                .zip(&rec.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            count += g.values.len();
        }
        if count == 0 {
            return Err(Error::Invalid("no grids".into()));
        }
        Ok(sum / count as f64)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws codes from `N(0, diag(eigenvalues))`.
pub fn sample_codes(basis: &EigenBasis, count: usize, seed: u64) -> Result<Vec<LatentCode>> {
    let lambda = &basis.eigenvalues;
    if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) || lambda.iter().all(|&l| l == 0.0) {
        return Err(Error::Invalid(
            "degenerate spectrum: no positive eigenvalue".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            LatentCode(
                lambda
                    .iter()
                    .map(|l| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        l.sqrt() * z
                    })
                    .collect::<Vec<f64>>(),
            )
        })
        .collect())
}

/// Smallest `k` whose leading eigenvalues reach `target` of the spectrum sum.
pub fn select_k(eigenvalues: &[f64], target: f64) -> Result<usize> {
    select_k_for_total(eigenvalues, eigenvalues.iter().sum(), target)
}

/// Like [`select_k`] but measured against a known total variance, which
/// may exceed the sum of a truncated spectrum.
pub fn select_k_for_total(eigenvalues: &[f64], total: f64, target: f64) -> Result<usize> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "variance target {target} not in (0, 1]"
        )));
    }
    if eigenvalues.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::Invalid(
            "eigenvalues must be finite and nonnegative".into(),
        ));
    }
    if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Invalid("eigenvalues must be descending".into()));
    }
    if !(total > 0.0) {
        return Err(Error::Invalid("spectrum has zero total variance".into()));
    }
    let mut cum = 0.0;
    for (i, &l) in eigenvalues.iter().enumerate() {
        cum += l;
        // relative slack so that target 1.0 is met by an exactly summed spectrum
        if cum >= target * total * (1.0 - 1e-12) {
            return Ok(i + 1);
        }
    }
    Err(Error::OutOfRange(format!(
        "the {} available components retain only {:.6} of the variance (target {target})",
        eigenvalues.len(),
        cum / total
    )))
}

/// Streaming PCA state. Memory is bounded by the retained rank plus one batch.
#[derive(Debug, Clone)]
pub struct IncrementalPca {
    k_max: usize,
    center: bool,
    geometry: Option<GridGeometry>,
    samples: usize,
    mean: Vec<f64>,
    /// Sum of squared deviations from the running mean.
    scatter: f64,
    singular: Vec<f64>,
    /// Row-major `rank x n`.
    rows: Vec<f64>,
}

impl IncrementalPca {
    pub fn new(k_max: usize, center: bool) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::OutOfRange("k_max must be at least 1".into()));
        }
        Ok(IncrementalPca {
            k_max,
            center,
            geometry: None,
            samples: 0,
            mean: Vec::new(),
            scatter: 0.0,
            singular: Vec::new(),
            rows: Vec::new(),
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Folds one batch into the model.
    pub fn partial_fit(&mut self, batch: &[SdfGrid]) -> Result<()> {
        let Some(first) = batch.first() else {
            return Ok(());
        };
        let geometry = *self.geometry.get_or_insert(first.geometry);
        for g in batch {
            if g.resolution() != geometry.resolution {
                return Err(Error::DimensionMismatch {
                    expected: geometry.resolution,
                    got: g.resolution(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("grid values".into()));
            }
        }
        let n = geometry.len();
        let b = batch.len();
        let n_old = self.samples;
        if n_old == 0 {
            self.mean = vec![0.0; n];
        }
        let mut batch_mean = vec![0.0; n];
        if self.center {
            for g in batch {
                for (m, v) in batch_mean.iter_mut().zip(&g.values) {
                    *m += v;
                }
            }
            batch_mean.iter_mut().for_each(|m| *m /= b as f64);
        }
        let rank = self.singular.len();
        let shift = n_old > 0 && self.center;
        let rows = rank + b + shift as usize;
        // columns of the transposed stack [diag(s) V; X - m_b; mean correction]
        let mut at = DMatrix::<f64>::zeros(n, rows);
        for r in 0..rank {
            let s = self.singular[r];
            let src = &self.rows[r * n..(r + 1) * n];
            at.column_mut(r)
                .iter_mut()
                .zip(src)
                .for_each(|(d, v)| *d = s * v);
        }
        let mut batch_scatter = 0.0;
        for (bi, g) in batch.iter().enumerate() {
            let mut col = at.column_mut(rank + bi);
            for (idx, d) in col.iter_mut().enumerate() {
                let v = g.values[idx] - batch_mean[idx];
                batch_scatter += v * v;
                *d = v;
            }
        }
        if shift {
            let w = ((n_old * b) as f64 / (n_old + b) as f64).sqrt();
            let mut shift_sq = 0.0;
            let mut col = at.column_mut(rows - 1);
            for (idx, d) in col.iter_mut().enumerate() {
                let diff = self.mean[idx] - batch_mean[idx];
                shift_sq += diff * diff;
                *d = w * diff;
            }
            self.scatter += batch_scatter + w * w * shift_sq;
        } else {
            self.scatter += batch_scatter;
        }
        if self.center {
            let total = (n_old + b) as f64;
            for (m, bm) in self.mean.iter_mut().zip(&batch_mean) {
                *m = (*m * n_old as f64 + bm * b as f64) / total;
            }
        }
        self.samples = n_old + b;

        // A^T = Q R, and the SVD R^T = U S W^T gives A = U S (Q W)^T
        let qr = at.qr();
        let q = qr.q();
        let r = qr.r();
        let svd = r.transpose().svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::NonFinite("SVD did not converge".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let keep = order.len().min(self.k_max);
        let mut singular = Vec::with_capacity(keep);
        let mut new_rows = vec![0.0; keep * n];
        for (slot, &o) in order.iter().take(keep).enumerate() {
            singular.push(svd.singular_values[o]);
            // component = Q * w_o, where w_o is row o of W^T
            let w = v_t.row(o).transpose();
            let comp = &q * w;
            let row = &mut new_rows[slot * n..(slot + 1) * n];
            row.iter_mut().zip(comp.iter()).for_each(|(d, v)| *d = *v);
            flip_sign(row);
        }
        self.singular = singular;
        self.rows = new_rows;
        if !self.singular.iter().all(|s| s.is_finite()) || !self.rows.iter().all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("incremental PCA update".into()));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<EigenBasis> {
        let geometry = self
            .geometry
            .ok_or_else(|| Error::Invalid("no grids were fitted".into()))?;
        if self.samples < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 grids, got {}",
                self.samples
            )));
        }
        if self.k_max > self.samples || self.singular.len() < self.k_max {
            return Err(Error::OutOfRange(format!(
                "k_max = {} exceeds the number of samples ({})",
                self.k_max, self.samples
            )));
        }
        let n = self.samples as f64;
        let mean = if self.center {
            self.mean
        } else {
            vec![0.0; geometry.len()]
        };
        Ok(EigenBasis {
            geometry,
            mean,
            components: self.rows,
            eigenvalues: self.singular.iter().map(|s| s * s / n).collect(),
            finetuned: false,
            total_variance: Some(self.scatter / n),
            samples: self.samples,
        })
    }
}

/// Makes the entry of largest magnitude positive (first one on ties).
fn flip_sign(row: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &v in row.iter() {
        if v.abs() > best {
            best = v.abs();
            sign = v.signum();
        }
    }
    if sign < 0.0 {
        row.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Fits the leading `k_max` components of a grid stream, `batch_size` grids at a time.
pub fn fit_incremental<I>(grids: I, batch_size: usize, k_max: usize) -> Result<EigenBasis>
where
    I: IntoIterator<Item = SdfGrid>,
{
    fit_incremental_with(grids.into_iter().map(Ok), batch_size, k_max, true)
}

/// Fallible-stream variant with optional centering.
pub fn fit_incremental_with<I>(
    grids: I,
    batch_size: usize,
    k_max: usize,
    center: bool,
) -> Result<EigenBasis>
where
    I: IntoIterator<Item = Result<SdfGrid>>,
{
    if batch_size < k_max {
        return Err(Error::OutOfRange(format!(
            "batch size {batch_size} is smaller than k_max {k_max}"
        )));
    }
    let mut pca = IncrementalPca::new(k_max, center)?;
    let mut batch = Vec::with_capacity(batch_size);
    for g in grids {
        batch.push(g?);
        if batch.len() == batch_size {
            pca.partial_fit(&batch)?;
            batch.clear();
        }
    }
    pca.partial_fit(&batch)?;
    pca.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(m: usize, values: Vec<f64>) -> SdfGrid {
        SdfGrid::new(GridGeometry::unit_box(m), values).unwrap()
    }

    #[test]
    fn constant_dataset_has_zero_variance() {
        let g = grid(4, (0..64).map(|i| (i as f64).sin()).collect());
        let basis = fit_incremental(vec![g.clone(); 6], 4, 2).unwrap();
        for (a, b) in basis.mean.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(basis.eigenvalues.iter().all(|&l| l.abs() < 1e-20));
    }

    #[test]
    fn three_point_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let grids: Vec<SdfGrid> = [-1.0, 0.0, 1.0]
            .iter()
            .map(|c| grid(4, mu.iter().zip(&v).map(|(m, e)| m + c * e).collect()))
            .collect();
        let basis = fit_incremental(grids, 3, 1).unwrap();
        assert!(dot(basis.component(0), &v).abs() > 0.999);
        assert!((basis.eigenvalues[0] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn select_k_examples() {
        assert_eq!(select_k(&[4.0, 3.0, 2.0, 1.0], 0.5).unwrap(), 2);
        assert_eq!(select_k(&[1.0, 0.0, 0.0], 0.3).unwrap(), 1);
        assert_eq!(select_k(&[1.0, 0.0, 0.0], 1.0).unwrap(), 1);
        assert_eq!(select_k(&[2.0, 1.0], 1.0).unwrap(), 2);
        assert!(select_k(&[0.0, 0.0], 0.5).is_err());
        assert!(select_k(&[1.0], 0.0).is_err());
    }

    #[test]
    fn errors() {
        let a = grid(4, vec![0.0; 64]);
        let b = grid(5, vec![0.0; 125]);
        assert!(matches!(
            fit_incremental(vec![a.clone(), b], 4, 1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(fit_incremental(vec![a.clone(), a.clone()], 4, 3).is_err());
        assert!(fit_incremental(vec![a.clone()], 4, 1).is_err());
        assert!(fit_incremental(vec![a.clone(), a], 1, 2).is_err());
    }

    #[test]
    fn file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grids: Vec<SdfGrid> = (0..5)
            .map(|_| grid(4, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let basis = fit_incremental(grids, 5, 3).unwrap();
        let back = EigenBasis::from_bytes(&basis.to_bytes()).unwrap();
        assert_eq!(back.k(), 3);
        assert!(!back.finetuned);
        for (a, b) in back.components.iter().zip(&basis.components) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let mut bytes = basis.to_bytes();
        bytes.pop();
        assert!(EigenBasis::from_bytes(&bytes).is_err());
    }
}
