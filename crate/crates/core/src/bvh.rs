//! Axis-aligned bounding volume hierarchy over mesh triangles.
//!
//! Supports the three queries the rest of the crate needs: closest point on
//! the surface, parity of ray crossings, and the first hit along a ray.

use crate::mesh::TriangleMesh;
use crate::Vec3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn cube(half: f64) -> Self {
        Aabb {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.min[a] && other.max[a] <= self.max[a])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.min[a] {
                self.min[a] - p[a]
            } else if p[a] > self.max[a] {
                p[a] - self.max[a]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2
    }

    /// Slab test; returns the entry parameter if the ray hits before `t_max`.
    fn ray_entry(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut ta = (self.min[a] - origin[a]) * inv_dir[a];
            let mut tb = (self.max[a] - origin[a]) * inv_dir[a];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0 * inf means the origin sits on a slab plane of a
            // ray parallel to it; treat it as inside the slab.
            if ta.is_nan() || tb.is_nan() {
                continue;
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// Which part of a triangle a closest point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Face,
    /// Edge `i` joins corner `i` and corner `(i + 1) % 3`.
    Edge(u8),
    Vertex(u8),
}

#[derive(Debug, Clone, Copy)]
pub struct ClosestHit {
    pub distance_squared: f64,
    pub point: Vec3,
    pub triangle: usize,
    pub feature: Feature,
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, Feature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, Feature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, Feature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Feature::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, Feature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Feature::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Feature::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Feature::Face)
}

/// Result of intersecting a ray with one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayHit {
    Miss,
    Hit(f64),
    /// The ray passes within a tiny band of an edge or vertex, or starts on
    /// the surface; parity is unreliable but the hit distance is usable.
    Grazing(f64),
    /// The ray lies in the triangle plane.
    Coplanar,
}

/// Möller–Trumbore with an explicit band around edges to flag ambiguous hits.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> RayHit {
    const BAND: f64 = 1e-9;
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    let scale = e1.norm() * e2.norm();
    if det.abs() <= 1e-12 * scale {
        // Parallel: only matters if the ray lies in the plane and crosses the triangle.
        let n = e1.cross(&e2);
        if (origin - a).dot(&n).abs() <= 1e-12 * scale {
            return RayHit::Coplanar;
        }
        return RayHit::Miss;
    }
    let inv = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv;
    if u < -BAND || u > 1.0 + BAND {
        return RayHit::Miss;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < -BAND || u + v > 1.0 + BAND {
        return RayHit::Miss;
    }
    let t = e2.dot(&qvec) * inv;
    if t < -BAND {
        return RayHit::Miss;
    }
    if u < BAND || v < BAND || u + v > 1.0 - BAND || t < BAND {
        return RayHit::Grazing(t);
    }
    RayHit::Hit(t)
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        bounds: Aabb,
        start: usize,
        end: usize,
    },
    Inner {
        bounds: Aabb,
        left: usize,
        right: usize,
    },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-box tree over the triangles of one mesh. Holds its own copy of
/// the triangle corners so queries do not need the mesh.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    /// Triangle ids in leaf order.
    order: Vec<usize>,
    tris: Vec<[Vec3; 3]>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = mesh
            .faces
            .iter()
            .map(|f| {
                [
                    mesh.vertices[f[0] as usize],
                    mesh.vertices[f[1] as usize],
                    mesh.vertices[f[2] as usize],
                ]
            })
            .collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        if !tris.is_empty() {
            build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Bvh { nodes, order, tris }
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes
            .first()
            .map(|n| *n.bounds())
            .unwrap_or_else(Aabb::empty)
    }

    pub fn closest(&self, p: &Vec3) -> Option<ClosestHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<ClosestHit> = None;
        let mut best_d2 = f64::INFINITY;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds().distance_squared(p) >= best_d2 {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &ti in &self.order[start..end] {
                        let [a, b, c] = &self.tris[ti];
                        let (q, feature) = closest_point_on_triangle(p, a, b, c);
                        let d2 = (p - q).norm_squared();
                        // Ties keep the lowest triangle id for determinism.
                        let better = d2 < best_d2
                            || (d2 == best_d2 && best.is_some_and(|h| ti < h.triangle));
                        if better {
                            best_d2 = d2;
                            best = Some(ClosestHit {
                                distance_squared: d2,
                                point: q,
                                triangle: ti,
                                feature,
                            });
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().distance_squared(p);
                    let dr = self.nodes[right].bounds().distance_squared(p);
                    // Visit the nearer child first.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }

    /// Number of crossings along the ray, or `None` if any hit was degenerate.
    pub fn crossing_count(&self, origin: &Vec3, dir: &Vec3) -> Option<usize> {
        let mut count = 0usize;
        let mut degenerate = false;
        self.walk_ray(origin, dir, f64::INFINITY, |hit| match hit {
            RayHit::Hit(_) => count += 1,
            RayHit::Grazing(_) | RayHit::Coplanar => degenerate = true,
            RayHit::Miss => {}
        });
        (!degenerate).then_some(count)
    }

    /// Distance to the first surface hit along a unit-length ray.
    pub fn first_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let mut best = f64::INFINITY;
        self.walk_ray(origin, dir, f64::INFINITY, |hit| {
            if let RayHit::Hit(t) | RayHit::Grazing(t) = hit {
                best = best.min(t.max(0.0));
            }
        });
        best.is_finite().then_some(best)
    }

    fn walk_ray(&self, origin: &Vec3, dir: &Vec3, t_max: f64, mut visit: impl FnMut(RayHit)) {
        if self.nodes.is_empty() {
            return;
        }
        let inv_dir = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds().ray_entry(origin, &inv_dir, t_max).is_none() {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &ti in &self.order[start..end] {
                        let [a, b, c] = &self.tris[ti];
                        visit(ray_triangle(origin, dir, a, b, c));
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
    }

    /// Checks the structural invariants: every triangle in exactly one leaf
    /// and parent boxes containing child boxes.
    pub fn check_invariants(&self) -> bool {
        let mut seen = vec![0usize; self.tris.len()];
        for node in &self.nodes {
            match *node {
                Node::Leaf { bounds, start, end } => {
                    for &ti in &self.order[start..end] {
                        seen[ti] += 1;
                        let mut tb = Aabb::empty();
                        for v in &self.tris[ti] {
                            tb.grow(v);
                        }
                        if !bounds.contains_box(&tb) {
                            return false;
                        }
                    }
                }
                Node::Inner {
                    bounds,
                    left,
                    right,
                } => {
                    if !bounds.contains_box(self.nodes[left].bounds())
                        || !bounds.contains_box(self.nodes[right].bounds())
                    {
                        return false;
                    }
                }
            }
        }
        let leaf_total: usize = self
            .nodes
            .iter()
            .map(|n| match n {
                Node::Leaf { start, end, .. } => end - start,
                _ => 0,
            })
            .sum();
        leaf_total == self.tris.len() && seen.iter().all(|&c| c == 1)
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &ti in &order[start..end] {
        for v in &tris[ti] {
            bounds.grow(v);
        }
        cbounds.grow(&centroids[ti]);
    }
    let index = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return index;
    }
    let ext = cbounds.extent();
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].sort_by(|&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node::Leaf {
        bounds,
        start: 0,
        end: 0,
    });
    let left = build_node(tris, centroids, order, start, mid, nodes);
    let right = build_node(tris, centroids, order, mid, end, nodes);
    nodes[index] = Node::Inner {
        bounds,
        left,
        right,
    };
    index
}
