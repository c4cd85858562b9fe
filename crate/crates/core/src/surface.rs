//! Zero level set extraction by marching cubes.
//!
//! The 256-entry case table is derived at first use from a single face
//! rule: on every cube face, each crossing where the inside region is left
//! (walking the face counterclockwise from outside) is joined to the nearest
//! crossing behind it where the inside region is entered. Positive corners
//! on ambiguous faces are therefore always separated, and since both cells
//! sharing a face apply the same rule, surfaces of closed zero sets come out
//! watertight.

use std::sync::OnceLock;

use crate::mesh::{sample_surface, SurfaceSample, TriangleMesh};
use crate::sdfgrid::{central_gradient, SdfGrid};
use crate::{Result, Vec3};

/// Edge interpolation parameters are kept this far from the corners so
/// that no triangle collapses to a point.
const EDGE_T_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct IsoSurface {
    pub mesh: TriangleMesh,
    /// Unit normals pointing toward decreasing values (the exterior).
    pub normals: Vec<Vec3>,
    /// Set when the grid had no sign change.
    pub empty: bool,
}

/// Cube corners: bit 0 is x, bit 1 is y, bit 2 is z.
const EDGES: [(usize, usize, usize); 12] = [
    (0, 1, 0),
    (2, 3, 0),
    (4, 5, 0),
    (6, 7, 0),
    (0, 2, 1),
    (1, 3, 1),
    (4, 6, 1),
    (5, 7, 1),
    (0, 4, 2),
    (1, 5, 2),
    (2, 6, 2),
    (3, 7, 2),
];

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    EDGES
        .iter()
        .position(|&(p, q, _)| p == lo && q == hi)
        .expect("corners differ in one bit")
}

/// The six faces as corner cycles, counterclockwise seen from outside.
fn faces() -> [[usize; 4]; 6] {
    let mut out = [[0; 4]; 6];
    for axis in 0..3 {
        let u = (axis + 1) % 3;
        let v = (axis + 2) % 3;
        for side in 0..2 {
            let corner = |cu: usize, cv: usize| (side << axis) | (cu << u) | (cv << v);
            let ccw = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            out[axis * 2 + side] = if side == 1 {
                ccw
            } else {
                [ccw[0], ccw[3], ccw[2], ccw[1]]
            };
        }
    }
    out
}

fn build_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    // next[e] = edge reached from crossing e along the surface boundary on some face
    let mut next = [usize::MAX; 12];
    for face in faces() {
        let crossing = |i: usize| {
            let (a, b) = (face[i], face[(i + 1) % 4]);
            match (inside(a), inside(b)) {
                (true, false) => 1i8,  // leaving the inside
                (false, true) => -1i8, // entering it
                _ => 0,
            }
        };
        for i in 0..4 {
            if crossing(i) != 1 {
                continue;
            }
            let entry = (1..4)
                .map(|back| (i + 4 - back) % 4)
                .find(|&j| crossing(j) == -1)
                .expect("every exit has an entry on the same face");
            let from = edge_between(face[i], face[(i + 1) % 4]);
            let to = edge_between(face[entry], face[(entry + 1) % 4]);
            next[from] = to;
        }
    }
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !used[e] {
            used[e] = true;
            lp.push(e as u8);
            e = next[e];
        }
        // the loop winds around the inside; reverse it so normals face outward
        for [a, b, c] in triangulate_loop(&lp) {
            tris.push([a, c, b]);
        }
    }
    tris
}

fn edge_faces(e: usize) -> Vec<usize> {
    let (a, b, _) = EDGES[e];
    faces()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.contains(&a) && f.contains(&b))
        .map(|(i, _)| i)
        .collect()
}

/// Triangulates a crossing loop without any diagonal between two crossings
/// on the same cube face. Such a diagonal would lie in the face and be
/// emitted again by the neighbouring cell.
fn triangulate_loop(lp: &[u8]) -> Vec<[u8; 3]> {
    let n = lp.len();
    let shares_face = |a: usize, b: usize| {
        let fb = edge_faces(lp[b] as usize);
        edge_faces(lp[a] as usize).iter().any(|f| fb.contains(f))
    };
    let allowed = |a: usize, b: usize| b == a + 1 || (a == 0 && b == n - 1) || !shares_face(a, b);
    // split[a][b]: apex k for sub-polygon a..=b, when it can be triangulated
    let mut split = vec![vec![None; n]; n];
    for len in 2..n {
        for a in 0..n - len {
            let b = a + len;
            if !allowed(a, b) {
                continue;
            }
            split[a][b] = (a + 1..b).find(|&k| {
                (k == a + 1 || split[a][k].is_some()) && (k + 1 == b || split[k][b].is_some())
            });
        }
    }
    let mut out = Vec::new();
    let mut stack = vec![(0, n - 1)];
    if split[0][n - 1].is_none() {
        for i in 1..n - 1 {
            out.push([lp[0], lp[i], lp[i + 1]]);
        }
        return out;
    }
    while let Some((a, b)) = stack.pop() {
        if b <= a + 1 {
            continue;
        }
        let k = split[a][b].expect("feasible sub-polygon");
        out.push([lp[a], lp[k], lp[b]]);
        stack.push((a, k));
        stack.push((k, b));
    }
    out
}

fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

/// Triangles (as local edge ids) for one corner configuration; bit `c` of
/// `case` is set when corner `c` is inside.
pub fn case_triangles(case: u8) -> &'static [[u8; 3]] {
    &case_table()[case as usize]
}

/// Extracts the `iso` level set. Values above `iso` count as inside.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> IsoSurface {
    let g = &grid.geometry;
    let m = g.resolution;
    let h = g.spacing;
    let nudge = 1e-6 * h;
    let value = |idx: usize| {
        let v = grid.values[idx] - iso;
        if v == 0.0 {
            -nudge
        } else {
            v
        }
    };
    let table = case_table();
    let mut vertex_of = vec![u32::MAX; 3 * g.len()];
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    if m < 2 {
        return IsoSurface {
            mesh: TriangleMesh::new(vertices, faces),
            normals,
            empty: true,
        };
    }
    let mut corner_idx = [0usize; 8];
    let mut corner_val = [0f64; 8];
    for k in 0..m - 1 {
        for j in 0..m - 1 {
            for i in 0..m - 1 {
                let mut case = 0usize;
                for c in 0..8 {
                    let idx = g.index(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1));
                    corner_idx[c] = idx;
                    corner_val[c] = value(idx);
                    if corner_val[c] > 0.0 {
                        case |= 1 << c;
                    }
                }
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let (a, b, axis) = EDGES[e];
                            let key = 3 * corner_idx[a] + axis;
                            if vertex_of[key] == u32::MAX {
                                let (fa, fb) = (corner_val[a], corner_val[b]);
                                let t = (fa / (fa - fb)).clamp(EDGE_T_MARGIN, 1.0 - EDGE_T_MARGIN);
                                let pa = g.center_of(corner_idx[a]);
                                let pb = g.center_of(corner_idx[b]);
                                vertices.push(pa + (pb - pa) * t);
                                let (ai, aj, ak) = g.coords(corner_idx[a]);
                                let (bi, bj, bk) = g.coords(corner_idx[b]);
                                let ga = central_gradient(&grid.values, g, ai, aj, ak);
                                let gb = central_gradient(&grid.values, g, bi, bj, bk);
                                normals.push(-(ga + (gb - ga) * t));
                                vertex_of[key] = (vertices.len() - 1) as u32;
                            }
                            local[e] = vertex_of[key];
                        }
                        ids[slot] = local[e];
                    }
                    faces.push(ids);
                }
            }
        }
    }
    let mesh = TriangleMesh::new(vertices, faces);
    let normals = finish_normals(&mesh, normals);
    let empty = mesh.faces.is_empty();
    IsoSurface {
        mesh,
        normals,
        empty,
    }
}

/// Normalizes interpolated gradients, falling back to face normals where
/// the gradient vanishes.
fn finish_normals(mesh: &TriangleMesh, raw: Vec<Vec3>) -> Vec<Vec3> {
    let mut fallback = vec![Vec3::zeros(); mesh.vertices.len()];
    if raw.iter().any(|n| n.norm() < 1e-12) {
        for f in 0..mesh.faces.len() {
            let n = mesh.face_cross(f);
            for &v in &mesh.faces[f] {
                fallback[v as usize] += n;
            }
        }
    }
    raw.into_iter()
        .zip(fallback)
        .map(|(n, fb)| {
            if n.norm() >= 1e-12 {
                n.normalize()
            } else if fb.norm() > 0.0 {
                fb.normalize()
            } else {
                Vec3::x()
            }
        })
        .collect()
}

/// Area-uniform samples on the extracted surface; empty for `n == 0`.
pub fn surface_points(iso: &IsoSurface, n: usize, seed: u64) -> Result<Vec<SurfaceSample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    sample_surface(&iso.mesh, n, seed)
}
