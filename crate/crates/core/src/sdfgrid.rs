//! Signed distance grids sampled at voxel centers, interior positive.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bvh::{Aabb, Bvh, Feature};
use crate::mesh::TriangleMesh;
use crate::{Error, Result, Vec3};

const GRID_MAGIC: &[u8; 4] = b"ESDF";
const GRID_VERSION: u32 = 1;

/// Placement of an `M x M x M` lattice of voxel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub resolution: usize,
    /// Center of voxel `(0, 0, 0)`.
    pub origin: Vec3,
    pub spacing: f64,
}

impl GridGeometry {
    /// The shared domain `[-0.5, 0.5]^3` split into `m` voxels per axis.
    pub fn unit_box(m: usize) -> Self {
        Self::from_extent(m, &Aabb::cube(0.5))
    }

    /// Cubic lattice covering `extent`; uses the longest side if the box is not a cube.
    pub fn from_extent(m: usize, extent: &Aabb) -> Self {
        let spacing = extent.extent().max() / m as f64;
        GridGeometry {
            resolution: m,
            origin: extent.min + Vec3::repeat(0.5 * spacing),
            spacing,
        }
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.resolution == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let m = self.resolution;
        (idx % m, (idx / m) % m, idx / (m * m))
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        let (i, j, k) = self.coords(idx);
        self.center(i, j, k)
    }

    /// Box spanned by the voxels (not just their centers).
    pub fn extent(&self) -> Aabb {
        let lo = self.origin - Vec3::repeat(0.5 * self.spacing);
        Aabb {
            min: lo,
            max: lo + Vec3::repeat(self.spacing * self.resolution as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub geometry: GridGeometry,
    /// `M^3` values, x fastest.
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::DimensionMismatch {
                expected: geometry.len(),
                got: values.len(),
            });
        }
        Ok(SdfGrid { geometry, values })
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(&Vec3) -> f64) -> Self {
        let values = (0..geometry.len())
            .map(|i| f(&geometry.center_of(i)))
            .collect();
        SdfGrid { geometry, values }
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Self {
        SdfGrid {
            geometry,
            values: vec![value; geometry.len()],
        }
    }

    pub fn resolution(&self) -> usize {
        self.geometry.resolution
    }

    pub fn spacing(&self) -> f64 {
        self.geometry.spacing
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.geometry.index(i, j, k)]
    }

    pub fn negated(&self) -> SdfGrid {
        SdfGrid {
            geometry: self.geometry,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    /// Rounds every value to `f32`, matching what the grid file stores.
    pub fn quantized(mut self) -> SdfGrid {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self
    }

    /// Clamps values to `[-band, band]`.
    pub fn clamped(&self, band: f64) -> SdfGrid {
        SdfGrid {
            geometry: self.geometry,
            values: self.values.iter().map(|v| v.clamp(-band, band)).collect(),
        }
    }

    /// Central-difference gradient, one-sided on the domain boundary.
    pub fn gradient(&self, i: usize, j: usize, k: usize) -> Vec3 {
        central_gradient(&self.values, &self.geometry, i, j, k)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut out = Vec::with_capacity(28 + 4 * self.values.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        out.extend_from_slice(&(g.resolution as u32).to_le_bytes());
        for a in 0..3 {
            out.extend_from_slice(&(g.origin[a] as f32).to_le_bytes());
        }
        out.extend_from_slice(&(g.spacing as f32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SdfGrid> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != GRID_MAGIC {
            return Err(Error::Format("missing ESDF magic".into()));
        }
        let version = r.u32()?;
        if version != GRID_VERSION {
            return Err(Error::Format(format!("unsupported grid version {version}")));
        }
        let m = r.u32()? as usize;
        let origin = Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
        let spacing = r.f32()? as f64;
        let geometry = GridGeometry {
            resolution: m,
            origin,
            spacing,
        };
        let values = r.f32_vec(geometry.len())?;
        r.finish()?;
        Ok(SdfGrid { geometry, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<SdfGrid> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor shared by the binary artifact readers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn central_gradient(
    values: &[f64],
    g: &GridGeometry,
    i: usize,
    j: usize,
    k: usize,
) -> Vec3 {
    let m = g.resolution;
    let h = g.spacing;
    let d = |lo: usize, hi: usize, steps: f64| (values[hi] - values[lo]) / (steps * h);
    let axis = |c: usize, idx: &dyn Fn(usize) -> usize| -> f64 {
        if m < 2 {
            0.0
        } else if c == 0 {
            d(idx(0), idx(1), 1.0)
        } else if c == m - 1 {
            d(idx(m - 2), idx(m - 1), 1.0)
        } else {
            d(idx(c - 1), idx(c + 1), 2.0)
        }
    };
    Vec3::new(
        axis(i, &|x| g.index(x, j, k)),
        axis(j, &|y| g.index(i, y, k)),
        axis(k, &|z| g.index(i, j, z)),
    )
}

// ---------------------------------------------------------------------------
// Mesh to SDF

/// Distance and inside/outside queries against one watertight mesh.
pub struct MeshDistance {
    bvh: Bvh,
    faces: Vec<[u32; 3]>,
    face_normals: Vec<Vec3>,
    edge_normals: HashMap<(u32, u32), Vec3>,
    vertex_normals: Vec<Vec3>,
}

/// Fixed, deliberately non-axis-aligned ray directions for the parity vote.
const RAY_DIRECTIONS: [[f64; 3]; 3] = [
    [0.537_700_5, 0.818_428_3, 0.204_300_1],
    [-0.661_207_9, 0.150_321_7, 0.734_911_3],
    [0.224_638_7, -0.705_012_9, -0.672_837_1],
];

impl MeshDistance {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        mesh.check_watertight()?;
        let face_normals: Vec<Vec3> = (0..mesh.faces.len()).map(|f| mesh.face_normal(f)).collect();
        let mut edge_normals: HashMap<(u32, u32), Vec3> = HashMap::new();
        let mut vertex_normals = vec![Vec3::zeros(); mesh.vertices.len()];
        for (fi, f) in mesh.faces.iter().enumerate() {
            let n = face_normals[fi];
            for c in 0..3 {
                let (a, b) = (f[c], f[(c + 1) % 3]);
                *edge_normals
                    .entry((a.min(b), a.max(b)))
                    .or_insert_with(Vec3::zeros) += n;
                // angle-weighted vertex pseudo-normal
                let p = mesh.vertices[f[c] as usize];
                let u = mesh.vertices[f[(c + 1) % 3] as usize] - p;
                let w = mesh.vertices[f[(c + 2) % 3] as usize] - p;
                let angle = (u.dot(&w) / (u.norm() * w.norm())).clamp(-1.0, 1.0).acos();
                vertex_normals[f[c] as usize] += n * angle;
            }
        }
        Ok(MeshDistance {
            bvh: Bvh::build(mesh),
            faces: mesh.faces.clone(),
            face_normals,
            edge_normals,
            vertex_normals,
        })
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn unsigned_distance(&self, p: &Vec3) -> f64 {
        self.bvh
            .closest(p)
            .map(|h| h.distance_squared.sqrt())
            .unwrap_or(f64::INFINITY)
    }

    /// Inside test from the angle-weighted pseudo-normal at the closest feature.
    pub fn inside_by_pseudo_normal(&self, p: &Vec3) -> bool {
        let Some(hit) = self.bvh.closest(p) else {
            return false;
        };
        let f = self.faces[hit.triangle];
        let n = match hit.feature {
            Feature::Face => self.face_normals[hit.triangle],
            Feature::Edge(e) => {
                let (a, b) = (f[e as usize], f[(e as usize + 1) % 3]);
                self.edge_normals[&(a.min(b), a.max(b))]
            }
            Feature::Vertex(v) => self.vertex_normals[f[v as usize] as usize],
        };
        (p - hit.point).dot(&n) < 0.0
    }

    /// Odd-crossing test along one direction, retried with small
    /// deterministic perturbations when a hit grazes an edge or vertex.
    fn parity(&self, p: &Vec3, base: &Vec3) -> Option<bool> {
        for attempt in 0..8u32 {
            let dir = if attempt == 0 {
                *base
            } else {
                let a = attempt as f64;
                (base + Vec3::new((a * 1.618).sin(), (a * 2.718).cos(), (a * 0.577).sin()) * 1e-3)
                    .normalize()
            };
            if let Some(count) = self.bvh.crossing_count(p, &dir) {
                return Some(count % 2 == 1);
            }
        }
        None
    }

    /// Majority vote of three ray parities.
    pub fn inside_by_parity(&self, p: &Vec3) -> bool {
        let mut votes = 0;
        let mut cast = 0;
        for d in RAY_DIRECTIONS {
            let dir = Vec3::new(d[0], d[1], d[2]).normalize();
            let inside = match self.parity(p, &dir) {
                Some(b) => b,
                None => self.inside_by_pseudo_normal(p),
            };
            cast += 1;
            votes += inside as usize;
            // two agreeing votes decide
            if votes == 2 || cast - votes == 2 {
                break;
            }
        }
        votes >= 2
    }

    /// Interior-positive signed distance.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let d = self.unsigned_distance(p);
        if d == 0.0 {
            return 0.0;
        }
        if self.inside_by_parity(p) {
            d
        } else {
            -d
        }
    }
}

/// Samples the signed distance of a watertight mesh at voxel centers of an
/// `m^3` lattice over `extent`.
pub fn compute_sdf(mesh: &TriangleMesh, m: usize, extent: &Aabb) -> Result<SdfGrid> {
    if m < 8 {
        return Err(Error::OutOfRange(format!("grid resolution {m} < 8")));
    }
    compute_sdf_on(mesh, GridGeometry::from_extent(m, extent))
}

pub fn compute_sdf_on(mesh: &TriangleMesh, geometry: GridGeometry) -> Result<SdfGrid> {
    let query = MeshDistance::new(mesh)?;
    Ok(SdfGrid::from_fn(geometry, |p| query.signed_distance(p)))
}

// ---------------------------------------------------------------------------
// Closed-form oracles

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticShape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned, centered at the origin.
    Box {
        half: Vec3,
    },
    /// Segment along the y axis from `-half_length` to `half_length`.
    Capsule {
        radius: f64,
        half_length: f64,
    },
}

impl AnalyticShape {
    /// Exact interior-positive signed distance.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match *self {
            AnalyticShape::Sphere { radius } => radius - p.norm(),
            AnalyticShape::Box { half } => {
                let q = p.abs() - half;
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                -(outside + inside)
            }
            AnalyticShape::Capsule {
                radius,
                half_length,
            } => {
                let y = p.y.clamp(-half_length, half_length);
                radius - (p - Vec3::new(0.0, y, 0.0)).norm()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AnalyticShape::Sphere { radius } => radius > 0.0,
            AnalyticShape::Box { half } => half.min() > 0.0,
            AnalyticShape::Capsule {
                radius,
                half_length,
            } => radius > 0.0 && half_length >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfRange(format!(
                "invalid analytic shape {self:?}"
            )))
        }
    }
}

/// Exact SDF of a primitive on the shared `[-0.5, 0.5]^3` lattice.
pub fn analytic_sdf(shape: &AnalyticShape, m: usize) -> SdfGrid {
    SdfGrid::from_fn(GridGeometry::unit_box(m), |p| shape.signed_distance(p))
}

// ---------------------------------------------------------------------------
// Properties

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EikonalStats {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// Pointwise `(|grad phi| - 1)^2` on the central-difference stencil.
pub fn eikonal_residual_field(grid: &SdfGrid) -> Vec<f64> {
    let g = &grid.geometry;
    (0..g.len())
        .map(|idx| {
            let (i, j, k) = g.coords(idx);
            let n = grid.gradient(i, j, k).norm();
            (n - 1.0) * (n - 1.0)
        })
        .collect()
}

/// Voxels kept by the eikonal mask: `|phi| >= band` and not within one voxel
/// of a kink (a sign flip in the one-sided differences along some axis,
/// the discrete trace of the medial axis).
pub fn eikonal_mask(grid: &SdfGrid, band: f64) -> Vec<bool> {
    let g = &grid.geometry;
    let m = g.resolution;
    let v = &grid.values;
    let mut kink = vec![false; g.len()];
    for idx in 0..g.len() {
        let (i, j, k) = g.coords(idx);
        let c = [i, j, k];
        for axis in 0..3 {
            if c[axis] == 0 || c[axis] + 1 >= m {
                continue;
            }
            let mut lo = c;
            let mut hi = c;
            lo[axis] -= 1;
            hi[axis] += 1;
            let back = v[idx] - v[g.index(lo[0], lo[1], lo[2])];
            let fwd = v[g.index(hi[0], hi[1], hi[2])] - v[idx];
            let sign = |x: f64| (x > 0.0) as i8 - (x < 0.0) as i8;
            if sign(back) != sign(fwd) {
                kink[idx] = true;
            }
        }
    }
    let mut keep = vec![true; g.len()];
    for idx in 0..g.len() {
        if v[idx].abs() < band {
            keep[idx] = false;
            continue;
        }
        let (i, j, k) = g.coords(idx);
        'nbr: for dk in -1i64..=1 {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (x, y, z) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    if x < 0 || y < 0 || z < 0 || x >= m as i64 || y >= m as i64 || z >= m as i64 {
                        continue;
                    }
                    if kink[g.index(x as usize, y as usize, z as usize)] {
                        keep[idx] = false;
                        break 'nbr;
                    }
                }
            }
        }
    }
    keep
}

/// Mean and max eikonal residual, over all voxels or over the masked set.
pub fn eikonal_residual(grid: &SdfGrid, mask_band: Option<f64>) -> EikonalStats {
    let field = eikonal_residual_field(grid);
    let keep = mask_band.map(|b| eikonal_mask(grid, b));
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut count = 0;
    for (i, r) in field.iter().enumerate() {
        if keep.as_ref().is_some_and(|k| !k[i]) {
            continue;
        }
        sum += r;
        max = max.max(*r);
        count += 1;
    }
    EikonalStats {
        mean: if count > 0 { sum / count as f64 } else { 0.0 },
        max,
        count,
    }
}

/// Voxel is occupied iff its value is strictly positive.
pub fn occupancy(grid: &SdfGrid) -> Vec<bool> {
    grid.values.iter().map(|&v| v > 0.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{box_mesh, icosphere};

    #[test]
    fn sphere_closed_form_near_origin() {
        let g = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, 32);
        let c = g.geometry.center(16, 16, 16);
        assert_eq!(g.at(16, 16, 16), 0.3 - c.norm());
    }

    #[test]
    fn box_is_lipschitz() {
        let g = analytic_sdf(
            &AnalyticShape::Box {
                half: Vec3::new(0.2, 0.1, 0.3),
            },
            24,
        );
        let h = g.spacing();
        let m = g.resolution();
        for k in 0..m {
            for j in 0..m {
                for i in 0..m - 1 {
                    assert!((g.at(i + 1, j, k) - g.at(i, j, k)).abs() <= 3f64.sqrt() * h);
                }
            }
        }
    }

    #[test]
    fn zero_length_capsule_is_sphere() {
        let a = analytic_sdf(
            &AnalyticShape::Capsule {
                radius: 0.25,
                half_length: 0.0,
            },
            16,
        );
        let b = analytic_sdf(&AnalyticShape::Sphere { radius: 0.25 }, 16);
        assert_eq!(a, b);
    }

    #[test]
    fn eikonal_cases() {
        let geo = GridGeometry::unit_box(16);
        let c = eikonal_residual(&SdfGrid::constant(geo, 0.7), None);
        assert_eq!((c.mean, c.max), (1.0, 1.0));
        let ramp = SdfGrid::from_fn(geo, |p| p.x);
        let r = eikonal_residual(&ramp, None);
        assert!(r.max < 1e-20);

        let sphere = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, 64);
        let field = eikonal_residual_field(&sphere);
        let h = sphere.spacing();
        let (mut s, mut n) = (0.0, 0);
        for (i, r) in field.iter().enumerate() {
            if sphere.geometry.center_of(i).norm() > 2.0 * h {
                s += r;
                n += 1;
            }
        }
        assert!(s / (n as f64) < 1e-3);
        // the masked mode drops the kink at the center on its own
        let masked = eikonal_residual(&sphere, Some(0.0));
        assert!(masked.mean < 1e-3 && masked.count < sphere.values.len());
    }

    #[test]
    fn occupancy_cases() {
        let g = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, 64);
        let occ = occupancy(&g);
        let frac = occ.iter().filter(|&&b| b).count() as f64 / occ.len() as f64;
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.027;
        assert!((frac - exact).abs() / exact < 0.03);
        let flipped = occupancy(&g.negated());
        // sign flip complements occupancy wherever the value is nonzero
        assert!(occ
            .iter()
            .zip(&flipped)
            .zip(&g.values)
            .all(|((a, b), v)| *v == 0.0 || a != b));
        assert!(occupancy(&SdfGrid::constant(g.geometry, -1.0))
            .iter()
            .all(|b| !b));
    }

    #[test]
    fn mesh_sdf_matches_analytic_box() {
        let mesh = box_mesh(Vec3::new(0.2, 0.2, 0.2));
        let g = compute_sdf(&mesh, 64, &Aabb::cube(0.5)).unwrap();
        let h = g.spacing();
        // voxel nearest the origin
        let v = g.at(32, 32, 32);
        assert!((v - 0.2).abs() <= h);
        assert!(g.at(0, 0, 0) < 0.0);
    }

    #[test]
    fn parity_agrees_with_pseudo_normal() {
        let mesh = icosphere(0.3, 3);
        let q = MeshDistance::new(&mesh).unwrap();
        let geo = GridGeometry::unit_box(16);
        for idx in 0..geo.len() {
            let p = geo.center_of(idx);
            assert_eq!(
                q.inside_by_parity(&p),
                q.inside_by_pseudo_normal(&p),
                "{p:?}"
            );
        }
    }

    #[test]
    fn rejects_open_mesh_and_small_grid() {
        let mut mesh = box_mesh(Vec3::new(0.2, 0.2, 0.2));
        assert!(compute_sdf(&mesh, 4, &Aabb::cube(0.5)).is_err());
        mesh.faces.pop();
        assert!(matches!(
            compute_sdf(&mesh, 8, &Aabb::cube(0.5)),
            Err(Error::NotWatertight { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let g = analytic_sdf(&AnalyticShape::Sphere { radius: 0.3 }, 8).quantized();
        let bytes = g.to_bytes();
        assert_eq!(&bytes[..4], b"ESDF");
        assert_eq!(bytes.len(), 28 + 4 * 512);
        let back = SdfGrid::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.values, g.values);
        assert!(SdfGrid::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
