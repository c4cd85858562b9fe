#![allow(dead_code)]

use eigensdf::sdfgrid::{analytic_sdf, AnalyticShape, GridGeometry, SdfGrid};
use eigensdf::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random primitive sized to sit well inside the unit box.
pub fn random_shape(r: &mut ChaCha8Rng) -> AnalyticShape {
    match r.random_range(0..3) {
        0 => AnalyticShape::Sphere {
            radius: r.random_range(0.12..0.4),
        },
        1 => AnalyticShape::Box {
            half: Vec3::new(
                r.random_range(0.08..0.35),
                r.random_range(0.08..0.35),
                r.random_range(0.08..0.35),
            ),
        },
        _ => AnalyticShape::Capsule {
            radius: r.random_range(0.08..0.2),
            half_length: r.random_range(0.0..0.25),
        },
    }
}

pub fn analytic_dataset(n: usize, m: usize, seed: u64) -> Vec<SdfGrid> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| analytic_sdf(&random_shape(&mut r), m))
        .collect()
}

pub fn random_grid(m: usize, scale: f64, seed: u64) -> SdfGrid {
    let mut r = rng(seed);
    SdfGrid::from_fn(GridGeometry::unit_box(m), |_| r.random_range(-scale..scale))
}

/// Smooth random field with a zero level set near a sphere of radius 0.25.
pub fn wobbly_sphere(m: usize, seed: u64) -> SdfGrid {
    let mut r = rng(seed);
    let a: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.05..0.05));
    SdfGrid::from_fn(GridGeometry::unit_box(m), |p| {
        0.25 - p.norm()
            + a[0] * (7.0 * p.x).sin()
            + a[1] * (5.0 * p.y).cos()
            + a[2] * (6.0 * p.z).sin()
    })
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}
