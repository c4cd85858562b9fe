//! Triangle meshes: I/O, watertightness checks, surface sampling and the
//! procedural shape families that make up the desk-scale dataset.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bvh::Aabb;
use crate::sdfgrid::{GridGeometry, SdfGrid};
use crate::{Error, Result, Vec3};

/// Half-width of the box meshes are normalized into on load.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.45;

const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    /// Counterclockwise when seen from outside.
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub point: Vec3,
    /// Outward unit normal.
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "off" => Some(MeshFormat::Off),
            _ => None,
        }
    }
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Self {
        TriangleMesh { vertices, faces }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i as usize])
    }

    /// Non-normalized face normal (twice the area, outward for CCW faces).
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        self.face_cross(face).normalize()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Enclosed volume by the divergence theorem; positive for outward orientation.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> Aabb {
        let mut b = Aabb::empty();
        for v in &self.vertices {
            b.grow(v);
        }
        b
    }

    /// Edges that are not shared by exactly two faces with opposite
    /// directions, as sorted `(min, max)` vertex pairs.
    pub fn non_manifold_edges(&self) -> Vec<(u32, u32)> {
        let mut directed: BTreeMap<(u32, u32), (u32, u32)> = BTreeMap::new();
        for f in &self.faces {
            for i in 0..3 {
                let (a, b) = (f[i], f[(i + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let entry = directed.entry(key).or_insert((0, 0));
                if a < b {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        directed
            .into_iter()
            .filter(|(_, (fwd, back))| !(*fwd == 1 && *back == 1))
            .map(|(k, _)| k)
            .collect()
    }

    pub fn check_watertight(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let bad = self.non_manifold_edges();
        if !bad.is_empty() {
            return Err(Error::NotWatertight { edges: bad });
        }
        Ok(())
    }

    /// Watertight, consistently oriented and free of degenerate faces.
    pub fn validate(&self) -> Result<()> {
        for f in &self.faces {
            if f.iter().any(|&i| i as usize >= self.vertices.len()) {
                return Err(Error::Invalid(format!(
                    "face {f:?} references a missing vertex"
                )));
            }
        }
        self.check_watertight()?;
        for face in 0..self.faces.len() {
            let area = self.face_area(face);
            if !(area > MIN_FACE_AREA) {
                return Err(Error::DegenerateFace { face, area });
            }
        }
        Ok(())
    }

    /// Reverses every face if the mesh is inside-out.
    pub fn orient_outward(&mut self) {
        if self.signed_volume() < 0.0 {
            for f in &mut self.faces {
                f.swap(1, 2);
            }
        }
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Centers the bounding box at the origin and scales uniformly so the
    /// longest side spans `[-0.45, 0.45]`.
    pub fn normalized(&self) -> TriangleMesh {
        let b = self.bounds();
        let center = b.center();
        let longest = b.extent().max();
        let scale = if longest > 0.0 {
            2.0 * NORMALIZED_HALF_EXTENT / longest
        } else {
            1.0
        };
        self.transformed(|v| (v - center) * scale)
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 24);
        for v in &self.vertices {
            // Shortest round-trip representation keeps write/load lossless.
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }
}

/// Parses an ASCII OBJ document. Only `v` and `f` records are read;
/// polygons are fan-triangulated and `v/vt/vn` references are accepted.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        line: line_no,
                        msg: format!("bad vertex coordinate: {e}"),
                    })?;
                if coords.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "vertex needs three coordinates".into(),
                    });
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad face index {tok:?}"),
                    })?;
                    let resolved = if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        i - 1
                    };
                    if resolved < 0 {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("face index {i} out of range"),
                        });
                    }
                    idx.push(resolved as u32);
                }
                push_polygon(&mut faces, &idx, line_no)?;
            }
            _ => {}
        }
    }
    finish_parse(vertices, faces)
}

/// Parses an OFF document (optionally with `#` comments).
pub fn parse_off(text: &str) -> Result<TriangleMesh> {
    let mut tokens = text
        .lines()
        .enumerate()
        .flat_map(|(ln, l)| {
            let l = l.split('#').next().unwrap_or("");
            l.split_whitespace().map(move |t| (ln + 1, t))
        })
        .peekable();
    let bad = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    match tokens.next() {
        Some((_, "OFF")) => {}
        Some((l, _)) => return Err(bad(l, "missing OFF header")),
        None => return Err(bad(1, "empty file")),
    }
    let mut next_num = |what: &str| -> Result<(usize, f64)> {
        let (l, t) = tokens
            .next()
            .ok_or_else(|| bad(0, &format!("unexpected end of file reading {what}")))?;
        t.parse::<f64>()
            .map(|v| (l, v))
            .map_err(|_| bad(l, &format!("bad {what} {t:?}")))
    };
    let (_, nv) = next_num("vertex count")?;
    let (_, nf) = next_num("face count")?;
    let _ = next_num("edge count")?;
    let mut vertices = Vec::with_capacity(nv as usize);
    for _ in 0..nv as usize {
        let (_, x) = next_num("coordinate")?;
        let (_, y) = next_num("coordinate")?;
        let (_, z) = next_num("coordinate")?;
        vertices.push(Vec3::new(x, y, z));
    }
    let mut faces = Vec::with_capacity(nf as usize);
    for _ in 0..nf as usize {
        let (l, n) = next_num("polygon size")?;
        let mut idx = Vec::with_capacity(n as usize);
        for _ in 0..n as usize {
            let (_, i) = next_num("face index")?;
            idx.push(i as u32);
        }
        push_polygon(&mut faces, &idx, l)?;
    }
    finish_parse(vertices, faces)
}

fn push_polygon(faces: &mut Vec<[u32; 3]>, idx: &[u32], line: usize) -> Result<()> {
    if idx.len() < 3 {
        return Err(Error::Parse {
            line,
            msg: "face needs at least three vertices".into(),
        });
    }
    for i in 1..idx.len() - 1 {
        faces.push([idx[0], idx[i], idx[i + 1]]);
    }
    Ok(())
}

fn finish_parse(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<TriangleMesh> {
    if let Some(f) = faces
        .iter()
        .find(|f| f.iter().any(|&i| i as usize >= vertices.len()))
    {
        return Err(Error::Parse {
            line: 0,
            msg: format!("face {f:?} references a missing vertex"),
        });
    }
    Ok(TriangleMesh::new(vertices, faces))
}

/// Reads, validates and normalizes a mesh file.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mesh = match format {
        MeshFormat::Obj => parse_obj(&text)?,
        MeshFormat::Off => parse_off(&text)?,
    };
    mesh.validate()?;
    Ok(mesh.normalized())
}

/// Draws `n` points uniformly with respect to surface area.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<SurfaceSample>> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    let total = acc;
    let normals: Vec<Vec3> = (0..mesh.faces.len()).map(|f| mesh.face_normal(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let face = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.corners(face);
        let r1 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        let point = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
        out.push(SurfaceSample {
            point,
            normal: normals[face],
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Procedural shapes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipsoid,
    Box,
    Capsule,
    TableLike,
    ChairLike,
    Blend,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Ellipsoid,
        ShapeFamily::Box,
        ShapeFamily::Capsule,
        ShapeFamily::TableLike,
        ShapeFamily::ChairLike,
        ShapeFamily::Blend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Box => "box",
            ShapeFamily::Capsule => "capsule",
            ShapeFamily::TableLike => "table-like",
            ShapeFamily::ChairLike => "chair-like",
            ShapeFamily::Blend => "blend",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Documented `(min, max)` range of each parameter.
    pub fn param_ranges(self) -> &'static [(f64, f64)] {
        match self {
            // radii x, y, z
            ShapeFamily::Ellipsoid => &[(0.05, 0.45), (0.05, 0.45), (0.05, 0.45)],
            // half-extents x, y, z
            ShapeFamily::Box => &[(0.05, 0.45), (0.05, 0.45), (0.05, 0.45)],
            // radius, half segment length, tilt about z
            ShapeFamily::Capsule => &[(0.05, 0.3), (0.02, 0.4), (-PI, PI)],
            // top half-width, top half-depth, top thickness, leg height, leg half-thickness
            ShapeFamily::TableLike => &[
                (0.2, 0.45),
                (0.15, 0.45),
                (0.03, 0.08),
                (0.2, 0.6),
                (0.025, 0.06),
            ],
            // seat half-width, seat half-depth, seat thickness, leg height,
            // back height, leg half-thickness
            ShapeFamily::ChairLike => &[
                (0.18, 0.35),
                (0.18, 0.35),
                (0.03, 0.07),
                (0.15, 0.35),
                (0.15, 0.4),
                (0.025, 0.05),
            ],
            // radius a, radius b, center separation, smoothing width
            ShapeFamily::Blend => &[(0.12, 0.25), (0.12, 0.25), (0.1, 0.4), (0.02, 0.15)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, params: Vec<f64>) -> Self {
        ShapeSpec {
            family,
            params,
            seed: 0,
        }
    }

    /// Uniform parameters inside the family ranges, redrawn until the shape
    /// fits the normalization box.
    pub fn random(family: ShapeFamily, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let params = family
                .param_ranges()
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect();
            let spec = ShapeSpec {
                family,
                params,
                seed,
            };
            if spec.validate().is_ok() {
                return spec;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.family.param_ranges();
        if self.params.len() != ranges.len() {
            return Err(Error::OutOfRange(format!(
                "{} takes {} parameters, got {}",
                self.family.name(),
                ranges.len(),
                self.params.len()
            )));
        }
        for (i, (&p, &(lo, hi))) in self.params.iter().zip(ranges).enumerate() {
            if !(lo..=hi).contains(&p) {
                return Err(Error::OutOfRange(format!(
                    "{} parameter {i} = {p} outside [{lo}, {hi}]",
                    self.family.name()
                )));
            }
        }
        let half = self.half_extent_bound();
        if half > NORMALIZED_HALF_EXTENT + 1e-12 {
            return Err(Error::OutOfRange(format!(
                "{} extends to {half:.4}, beyond {NORMALIZED_HALF_EXTENT}",
                self.family.name()
            )));
        }
        Ok(())
    }

    /// Upper bound on `max |coordinate|` of the generated surface.
    fn half_extent_bound(&self) -> f64 {
        let p = &self.params;
        match self.family {
            ShapeFamily::Ellipsoid | ShapeFamily::Box => p[0].max(p[1]).max(p[2]),
            ShapeFamily::Capsule => p[0] + p[1],
            // smooth_min swells the union by at most k / 4
            ShapeFamily::TableLike => p[0].max(p[1]).max(0.5 * (p[2] + p[3])) + 0.25 * PART_BLEND,
            ShapeFamily::ChairLike => {
                p[0].max(p[1]).max(0.5 * (p[2] + p[3] + p[4])) + 0.25 * PART_BLEND
            }
            ShapeFamily::Blend => 0.5 * p[2] + p[0].max(p[1]) + 0.25 * p[3],
        }
    }
}

/// Builds the watertight mesh for a shape specification.
pub fn generate_shape(spec: &ShapeSpec) -> Result<TriangleMesh> {
    spec.validate()?;
    let p = &spec.params;
    let mut mesh = match spec.family {
        ShapeFamily::Ellipsoid => {
            icosphere(1.0, 4).transformed(|v| Vec3::new(v.x * p[0], v.y * p[1], v.z * p[2]))
        }
        ShapeFamily::Box => box_mesh(Vec3::new(p[0], p[1], p[2])),
        ShapeFamily::Capsule => {
            let (s, c) = p[2].sin_cos();
            capsule_mesh(p[0], p[1], 48, 12)
                .transformed(|v| Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z))
        }
        ShapeFamily::TableLike | ShapeFamily::ChairLike | ShapeFamily::Blend => {
            implicit_mesh(spec)?
        }
    };
    mesh.orient_outward();
    mesh.validate()?;
    Ok(mesh)
}

/// Subdivided icosahedron projected onto a sphere.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let mut mesh = TriangleMesh::new(verts.into_iter().map(|v| v * radius).collect(), faces);
    mesh.orient_outward();
    mesh
}

/// Axis-aligned box with the given half-extents, two triangles per side.
pub fn box_mesh(half: Vec3) -> TriangleMesh {
    let v = |x: f64, y: f64, z: f64| Vec3::new(x * half.x, y * half.y, z * half.z);
    let vertices = vec![
        v(-1.0, -1.0, -1.0),
        v(1.0, -1.0, -1.0),
        v(1.0, 1.0, -1.0),
        v(-1.0, 1.0, -1.0),
        v(-1.0, -1.0, 1.0),
        v(1.0, -1.0, 1.0),
        v(1.0, 1.0, 1.0),
        v(-1.0, 1.0, 1.0),
    ];
    let faces = vec![
        [0, 3, 2],
        [0, 2, 1],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [3, 7, 6],
        [3, 6, 2],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriangleMesh::new(vertices, faces)
}

/// Capsule along the y axis: a cylinder of half-length `half_length`
/// capped by hemispheres of radius `radius`.
pub fn capsule_mesh(
    radius: f64,
    half_length: f64,
    segments: usize,
    cap_rings: usize,
) -> TriangleMesh {
    // Profile rings from top to bottom, poles excluded.
    let mut rings: Vec<(f64, f64)> = Vec::new();
    for i in 1..=cap_rings {
        let theta = 0.5 * PI * i as f64 / cap_rings as f64;
        rings.push((radius * theta.sin(), half_length + radius * theta.cos()));
    }
    for i in 0..cap_rings {
        let theta = 0.5 * PI * i as f64 / cap_rings as f64;
        rings.push((radius * theta.cos(), -half_length - radius * theta.sin()));
    }
    lathe(
        &rings,
        half_length + radius,
        -half_length - radius,
        segments,
    )
}

fn lathe(rings: &[(f64, f64)], top: f64, bottom: f64, segments: usize) -> TriangleMesh {
    let mut vertices = vec![Vec3::new(0.0, top, 0.0)];
    for &(r, y) in rings {
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            vertices.push(Vec3::new(r * phi.cos(), y, r * phi.sin()));
        }
    }
    vertices.push(Vec3::new(0.0, bottom, 0.0));
    let bottom_id = (vertices.len() - 1) as u32;
    let ring = |i: usize, s: usize| (1 + i * segments + s % segments) as u32;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s + 1), ring(0, s)]);
    }
    for i in 0..rings.len() - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (
                ring(i, s),
                ring(i, s + 1),
                ring(i + 1, s),
                ring(i + 1, s + 1),
            );
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    let last = rings.len() - 1;
    for s in 0..segments {
        faces.push([bottom_id, ring(last, s), ring(last, s + 1)]);
    }
    let mut mesh = TriangleMesh::new(vertices, faces);
    mesh.orient_outward();
    mesh
}

/// Signed distance to an axis-aligned box, negative inside.
fn box_distance(p: &Vec3, center: &Vec3, half: &Vec3) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.sup(&Vec3::zeros()).norm();
    let inside = q.max().min(0.0);
    outside + inside
}

/// Polynomial smooth minimum of two distances.
fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

/// Smoothing width joining the parts of furniture shapes.
const PART_BLEND: f64 = 0.01;

/// Resolution of the helper grid used to mesh implicit families.
const IMPLICIT_RESOLUTION: usize = 64;

/// Outside-positive distance used to build the implicit families.
fn implicit_distance(spec: &ShapeSpec, p: &Vec3) -> f64 {
    let q = &spec.params;
    match spec.family {
        ShapeFamily::TableLike => {
            let (hw, hd, thick, leg_h, leg_r) = (q[0], q[1], q[2], q[3], q[4]);
            let height = thick + leg_h;
            let top_y = 0.5 * height - 0.5 * thick;
            let mut d = box_distance(
                p,
                &Vec3::new(0.0, top_y, 0.0),
                &Vec3::new(hw, 0.5 * thick, hd),
            );
            let leg_y = -0.5 * height + 0.5 * leg_h + 0.25 * thick;
            for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                let c = Vec3::new(sx * (hw - leg_r), leg_y, sz * (hd - leg_r));
                let leg = box_distance(p, &c, &Vec3::new(leg_r, 0.5 * leg_h + 0.25 * thick, leg_r));
                d = smooth_min(d, leg, PART_BLEND);
            }
            d
        }
        ShapeFamily::ChairLike => {
            let (hw, hd, thick, leg_h, back_h, leg_r) = (q[0], q[1], q[2], q[3], q[4], q[5]);
            let height = leg_h + thick + back_h;
            let seat_y = -0.5 * height + leg_h + 0.5 * thick;
            let mut d = box_distance(
                p,
                &Vec3::new(0.0, seat_y, 0.0),
                &Vec3::new(hw, 0.5 * thick, hd),
            );
            let back_c = Vec3::new(0.0, seat_y + 0.25 * thick + 0.5 * back_h, -hd + 0.5 * thick);
            let back = box_distance(
                p,
                &back_c,
                &Vec3::new(hw, 0.5 * back_h + 0.25 * thick, 0.5 * thick),
            );
            d = smooth_min(d, back, PART_BLEND);
            let leg_y = -0.5 * height + 0.5 * leg_h + 0.25 * thick;
            for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                let c = Vec3::new(sx * (hw - leg_r), leg_y, sz * (hd - leg_r));
                let leg = box_distance(p, &c, &Vec3::new(leg_r, 0.5 * leg_h + 0.25 * thick, leg_r));
                d = smooth_min(d, leg, PART_BLEND);
            }
            d
        }
        ShapeFamily::Blend => {
            let (ra, rb, sep, k) = (q[0], q[1], q[2], q[3]);
            let da = (p - Vec3::new(-0.5 * sep, 0.0, 0.0)).norm() - ra;
            let db = (p - Vec3::new(0.5 * sep, 0.0, 0.0)).norm() - rb;
            smooth_min(da, db, k)
        }
        _ => unreachable!("explicit families are meshed directly"),
    }
}

fn implicit_mesh(spec: &ShapeSpec) -> Result<TriangleMesh> {
    let geometry = GridGeometry::unit_box(IMPLICIT_RESOLUTION);
    let grid = SdfGrid::from_fn(geometry, |p| -implicit_distance(spec, p));
    let iso = crate::surface::marching_cubes(&grid, 0.0);
    if iso.mesh.is_empty() {
        return Err(Error::Invalid(format!(
            "{} produced an empty surface",
            spec.family.name()
        )));
    }
    Ok(iso.mesh)
}
