//! Acceptance suite. Prints one line per criterion and exits nonzero when
//! any criterion fails. Pass criterion numbers as arguments to run a subset.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use eigensdf::bvh::Aabb;
use eigensdf::encoders::make_input_pointcloud;
use eigensdf::finetune::{decoder_gradient, train_linear_ae, FinetuneConfig};
use eigensdf::mesh::{
    box_mesh, capsule_mesh, icosphere, sample_surface, SurfaceSample, TriangleMesh,
};
use eigensdf::metrics::{chamfer, fscore, iou, normal_consistency};
use eigensdf::optim::Schedule;
use eigensdf::pca::{
    fit_incremental, fit_incremental_with, select_k_for_total, EigenBasis, LatentCode,
};
use eigensdf::sdfgrid::{
    analytic_sdf, compute_sdf, occupancy, AnalyticShape, GridGeometry, SdfGrid,
};
use eigensdf::sdfloss::{sdf_loss, sdf_loss_grad, DeltaKind, LossConfig};
use eigensdf::surface::{marching_cubes, surface_points};
use eigensdf::Vec3;
use eigensdf_cli::commands::{
    bench_timings, finetune_on, ground_truth, run_experiment, test_input, train_encoder_on,
    EncoderConfig, ExperimentConfig, FinetuneSettings, Means, Task,
};
use eigensdf_cli::dataset::{generate, Dataset, DatasetConfig, Split};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const DESK_K: usize = 16;
const DESK_M: usize = 32;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Desk {
    _dir: TempDir,
    ds: Dataset,
    /// Rank-64 incremental fit of the training grids.
    wide: EigenBasis,
    basis: EigenBasis,
    train: Vec<SdfGrid>,
}

/// Default dataset at M = 32 with its PCA, built once.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        generate(&DatasetConfig::default(), dir.path()).expect("dataset");
        let ds = Dataset::open(dir.path()).expect("dataset opens");
        let train: Vec<SdfGrid> = ds
            .split(Split::Train)
            .iter()
            .map(|e| ds.grid(e, DESK_M).expect("grid"))
            .collect();
        let wide = fit_incremental_with(train.iter().cloned().map(Ok), 64, 64, true).expect("fit");
        let basis = wide.truncated(DESK_K).expect("truncate");
        Desk {
            _dir: dir,
            ds,
            wide,
            basis,
            train,
        }
    })
}

// ---------------------------------------------------------------------------
// 1. SDF correctness

/// Largest distance from the analytic zero set to the faces, sampled at
/// vertices, edge midpoints and centroids.
fn tessellation_bound(mesh: &TriangleMesh, shape: &AnalyticShape) -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.corners(f);
        for p in [
            a,
            b,
            c,
            (a + b) / 2.0,
            (b + c) / 2.0,
            (a + c) / 2.0,
            (a + b + c) / 3.0,
        ] {
            worst = worst.max(shape.signed_distance(&p).abs());
        }
    }
    worst
}

fn sdf_correctness() -> Result<String> {
    let cases = [
        (AnalyticShape::Sphere { radius: 0.35 }, icosphere(0.35, 4)),
        (
            AnalyticShape::Box {
                half: Vec3::new(0.3, 0.2, 0.25),
            },
            box_mesh(Vec3::new(0.3, 0.2, 0.25)),
        ),
        (
            AnalyticShape::Capsule {
                radius: 0.15,
                half_length: 0.2,
            },
            capsule_mesh(0.15, 0.2, 48, 12),
        ),
    ];
    let mut lines = Vec::new();
    for (shape, mesh) in &cases {
        let tess = tessellation_bound(mesh, shape);
        for m in [32, 64] {
            let h = 1.0 / m as f64;
            let got = compute_sdf(mesh, m, &Aabb::cube(0.5))?;
            let want = analytic_sdf(shape, m);
            let mut max_err: f64 = 0.0;
            let (mut far, mut agree) = (0usize, 0usize);
            for (g, w) in got.values.iter().zip(&want.values) {
                max_err = max_err.max((g - w).abs());
                if w.abs() > h {
                    far += 1;
                    agree += (g.signum() == w.signum()) as usize;
                }
            }
            ensure!(
                max_err <= h + tess,
                "{shape:?} at {m}: max error {max_err:.2e} > {:.2e}",
                h + tess
            );
            ensure!(
                agree == far,
                "{shape:?} at {m}: sign agreement {agree}/{far}"
            );
        }
        lines.push(format!("tess {tess:.1e}"));
    }
    Ok(format!(
        "sphere, box, capsule at M = 32, 64 within h + tessellation ({})",
        lines.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 2. Loss gradient

const STEP: f64 = 1e-4;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor).max(1e-300)
}

fn random_grid(m: usize, scale: f64, seed: u64) -> SdfGrid {
    let mut r = rng(seed);
    SdfGrid::from_fn(GridGeometry::unit_box(m), |_| r.random_range(-scale..scale))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn loss_gradient() -> Result<String> {
    let mut worst_phi: f64 = 0.0;
    let mut worst_e: f64 = 0.0;
    for alpha in [0.0, 0.01, 1.0] {
        for p in [1, 2] {
            let cfg = LossConfig {
                alpha,
                p,
                ..LossConfig::for_resolution(8)
            };
            for seed in 0..2 {
                let pred = random_grid(8, 0.3, seed);
                let truth = random_grid(8, 0.3, seed + 50);
                let (_, grad) = sdf_loss_grad(&pred, &truth, &cfg)?;
                let floor = 1e-2 * max_abs(&grad);
                let mut r = rng(seed + 7);
                for _ in 0..60 {
                    let i = r.random_range(0..grad.len());
                    let mut plus = pred.clone();
                    plus.values[i] += STEP;
                    let mut minus = pred.clone();
                    minus.values[i] -= STEP;
                    let fd = (sdf_loss(&plus, &truth, &cfg)?.total
                        - sdf_loss(&minus, &truth, &cfg)?.total)
                        / (2.0 * STEP);
                    worst_phi = worst_phi.max(rel_err(grad[i], fd, floor));
                }

                // through a random decoder
                let k = 3;
                let n = pred.values.len();
                let mut basis = EigenBasis {
                    geometry: pred.geometry,
                    mean: pred.values.clone(),
                    components: (0..k * n).map(|_| r.random_range(-0.05..0.05)).collect(),
                    eigenvalues: vec![1.0; k],
                    finetuned: false,
                    total_variance: None,
                    samples: 0,
                };
                let code = LatentCode((0..k).map(|_| r.random_range(-1.0..1.0)).collect());
                let (_, grad_e, _) = decoder_gradient(&basis, &code, &truth, &cfg)?;
                let floor = 1e-2 * max_abs(&grad_e);
                for _ in 0..30 {
                    let i = r.random_range(0..grad_e.len());
                    let orig = basis.components[i];
                    basis.components[i] = orig + STEP;
                    let lp = sdf_loss(&basis.decode(&code)?, &truth, &cfg)?.total;
                    basis.components[i] = orig - STEP;
                    let lm = sdf_loss(&basis.decode(&code)?, &truth, &cfg)?.total;
                    basis.components[i] = orig;
                    worst_e = worst_e.max(rel_err(grad_e[i], (lp - lm) / (2.0 * STEP), floor));
                }
            }
        }
    }
    ensure!(worst_phi < 1e-4, "dL/dphi relative error {worst_phi:.2e}");
    ensure!(worst_e < 1e-4, "dL/dE relative error {worst_e:.2e}");
    Ok(format!("max relative error dL/dphi {worst_phi:.1e}, dL/dE {worst_e:.1e} over alpha 0, 0.01, 1 and p 1, 2"))
}

// ---------------------------------------------------------------------------
// 3. PCA

fn random_primitive(r: &mut ChaCha8Rng) -> AnalyticShape {
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

/// Eigenvalues and components of the exact PCA via the Gram matrix.
fn dense_pca(grids: &[SdfGrid]) -> (Vec<f64>, DMatrix<f64>) {
    let n = grids.len();
    let d = grids[0].values.len();
    let mut x = DMatrix::from_fn(n, d, |i, j| grids[i].values[j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let eig = SymmetricEigen::new(&x * x.transpose());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0) / n as f64)
        .collect();
    let mut comps = DMatrix::zeros(d, n);
    for (c, &i) in order.iter().enumerate() {
        let v: DVector<f64> = x.transpose() * eig.eigenvectors.column(i);
        if v.norm() > 1e-12 {
            comps.set_column(c, &v.normalize());
        }
    }
    (lambda, comps)
}

fn pca() -> Result<String> {
    let mut r = rng(11);
    let grids: Vec<SdfGrid> = (0..200)
        .map(|_| analytic_sdf(&random_primitive(&mut r), 16))
        .collect();
    let basis = fit_incremental(grids.iter().cloned(), 32, 16)?;
    let ortho = basis.orthonormality_error();
    ensure!(ortho < 1e-6, "orthonormality error {ortho:.2e}");
    let (lambda, comps) = dense_pca(&grids);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for j in 1..16 {
        if lambda[j - 1] / lambda[j] > 1.5 {
            let a = DMatrix::from_fn(basis.dim(), j, |row, c| basis.component(c)[row]);
            let s = (a.transpose() * comps.columns(0, j)).singular_values();
            let angle = s.min().clamp(-1.0, 1.0).acos().to_degrees();
            ensure!(angle < 2.0, "top-{j} principal angle {angle:.3} degrees");
            worst = worst.max(angle);
            checked += 1;
        }
    }
    ensure!(checked > 0, "no well-separated components");

    let d = desk();
    ensure!(
        d.wide.orthonormality_error() < 1e-6,
        "desk orthonormality {:.2e}",
        d.wide.orthonormality_error()
    );
    let total = d.wide.total_variance.unwrap_or(0.0);
    let k = select_k_for_total(&d.wide.eigenvalues, total, 0.995)?;
    let retained = d.wide.truncated(k)?.retained_variance().unwrap_or(0.0);
    ensure!(retained >= 0.995, "select_k retains {retained:.5}");
    Ok(format!(
        "orthonormality {ortho:.1e}, worst angle {worst:.3} deg over {checked} subspaces, desk k = {k} retains {retained:.4}"
    ))
}

// ---------------------------------------------------------------------------
// 4. Eckart-Young ordering

fn random_orthonormal(geometry: GridGeometry, mean: &[f64], k: usize, seed: u64) -> EigenBasis {
    let n = geometry.len();
    let mut r = rng(seed);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    while comps.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        for c in &comps {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        comps.push(v);
    }
    EigenBasis {
        geometry,
        mean: mean.to_vec(),
        components: comps.concat(),
        eigenvalues: vec![1.0; k],
        finetuned: false,
        total_variance: None,
        samples: 0,
    }
}

fn eckart_young() -> Result<String> {
    let d = desk();
    let pca_mse = d.basis.reconstruction_mse(&d.train)?;
    let cfg = FinetuneConfig {
        epochs: 100,
        schedule: Schedule {
            initial: 1e-3,
            drop_epoch: 70,
            dropped: 1e-4,
        },
        batch: 16,
        ..FinetuneConfig::for_resolution(DESK_M)
    };
    let ae = train_linear_ae(&d.train, DESK_K, &cfg, None, 0)?;
    ensure!(
        ae.decoder_parameter_count() == d.basis.components.len() + d.basis.mean.len(),
        "parameter counts differ"
    );
    let ae_mse = ae.reconstruction_mse(&d.train)?;
    ensure!(
        pca_mse < ae_mse,
        "PCA {pca_mse:.3e} not below linear AE {ae_mse:.3e}"
    );
    let mut best_random = f64::INFINITY;
    for seed in 0..20 {
        let b = random_orthonormal(d.basis.geometry, &d.basis.mean, DESK_K, seed);
        let mse = b.reconstruction_mse(&d.train)?;
        ensure!(pca_mse < mse, "random basis {seed} reaches {mse:.3e}");
        best_random = best_random.min(mse);
    }
    Ok(format!(
        "MSE PCA {pca_mse:.3e} < linear AE {ae_mse:.3e}, best of 20 random {best_random:.3e}"
    ))
}

// ---------------------------------------------------------------------------
// 5. Finetuning gain

fn finetune_gain() -> Result<String> {
    let d = desk();
    let settings = FinetuneSettings {
        epochs: 30,
        learning_rate: 1e-6,
        drop_epoch: 20,
        dropped_rate: 1e-7,
        epsilon_voxels: 0.75,
        p: 1,
        alpha: 0.01,
        delta_kind: DeltaKind::Cosine,
        mask_band_voxels: None,
        ..FinetuneSettings::default()
    };
    let run = finetune_on(&d.ds, &d.basis, &settings)?;
    let cfg = ExperimentConfig {
        split: Split::Train,
        ..ExperimentConfig::default()
    };
    let rows = run_experiment(&d.ds, &d.basis, Some(&run.basis), None, &cfg)?;
    let base = Means::of(&rows.iter().map(|r| r.report).collect::<Vec<_>>());
    let ft = Means::of(&rows.iter().filter_map(|r| r.finetuned).collect::<Vec<_>>());
    let gain = 1.0 - ft.chamfer / base.chamfer;
    let detail = format!(
        "chamfer {:.5} -> {:.5} (gain {:.2}%, need 3%), nc {:.4} -> {:.4}",
        base.chamfer,
        ft.chamfer,
        100.0 * gain,
        base.nc,
        ft.nc
    );
    ensure!(gain >= 0.03, "{detail}");
    ensure!(base.nc - ft.nc <= 0.005, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6. Completion protocol

fn completion() -> Result<String> {
    let d = desk();
    let enc = EncoderConfig::default();
    let e0 = d.ds.split(Split::Test)[0];
    let mesh = d.ds.mesh(e0)?;
    let cloud = match test_input(&d.ds, e0, &enc)? {
        eigensdf_cli::commands::Sample::Cloud(c) => c,
        _ => anyhow::bail!("completion input is not a point cloud"),
    };
    ensure!(
        cloud.points.len() == 300 && enc.points == 300,
        "{} points",
        cloud.points.len()
    );
    ensure!(cloud.noise_sigma == 0.05, "sigma {}", cloud.noise_sigma);
    let clean = make_input_pointcloud(&mesh, 300, 0.0, cloud.seed)?;
    let offsets: Vec<f64> = cloud
        .points
        .iter()
        .zip(&clean.points)
        .flat_map(|(a, b)| {
            let v = a - b;
            [v.x, v.y, v.z]
        })
        .collect();
    let std = (offsets.iter().map(|x| x * x).sum::<f64>() / offsets.len() as f64).sqrt();
    ensure!((std - 0.05).abs() < 0.005, "empirical noise std {std:.4}");

    let model = train_encoder_on(&d.ds, &d.basis, &enc)?.model;
    let cfg = ExperimentConfig {
        task: Task::Completion,
        ..ExperimentConfig::default()
    };
    let rows = run_experiment(&d.ds, &d.basis, None, Some(&model), &cfg)?;
    let completion = Means::of(&rows.iter().map(|r| r.report).collect::<Vec<_>>()).iou;
    let mean_shape = occupancy(&d.basis.decode(&LatentCode::zeros(DESK_K))?);
    let mut baseline = 0.0;
    let test = d.ds.split(Split::Test);
    for e in &test {
        let (grid, _) = ground_truth(&d.ds, e, DESK_M, 1)?;
        baseline += iou(&mean_shape, &occupancy(&grid))?;
    }
    baseline /= test.len() as f64;
    let detail =
        format!("300 points, noise std {std:.4}; IoU {completion:.4} vs mean shape {baseline:.4}");
    ensure!(completion >= baseline + 0.05, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. Metric oracles

fn random_points(n: usize, r: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            )
        })
        .collect()
}

fn brute_nearest(p: &Vec3, q: &[Vec3]) -> (usize, f64) {
    q.iter()
        .enumerate()
        .map(|(j, x)| (j, (p - x).norm()))
        .fold(
            (0, f64::INFINITY),
            |best, c| if c.1 < best.1 { c } else { best },
        )
}

fn metric_oracles() -> Result<String> {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for pair in 0..100 {
        let (n, m) = (r.random_range(1..60), r.random_range(1..60));
        let p = random_points(n, &mut r);
        let q = random_points(m, &mut r);
        let side = |a: &[Vec3], b: &[Vec3]| {
            a.iter().map(|x| brute_nearest(x, b).1).sum::<f64>() / a.len() as f64
        };
        let want = 0.5 * side(&p, &q) + 0.5 * side(&q, &p);
        worst = worst.max((chamfer(&p, &q)? - want).abs());

        let tau = r.random_range(0.05..0.6);
        let frac = |a: &[Vec3], b: &[Vec3]| {
            a.iter().filter(|x| brute_nearest(x, b).1 <= tau).count() as f64 / a.len() as f64
        };
        let (prec, rec) = (frac(&q, &p), frac(&p, &q));
        let want_f = if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
        worst = worst.max((fscore(&p, &q, tau)? - want_f).abs());

        let sp: Vec<SurfaceSample> = p
            .iter()
            .map(|&point| SurfaceSample {
                point,
                normal: random_points(1, &mut r)[0].normalize(),
            })
            .collect();
        let sq: Vec<SurfaceSample> = q
            .iter()
            .map(|&point| SurfaceSample {
                point,
                normal: random_points(1, &mut r)[0].normalize(),
            })
            .collect();
        let nc_side = |a: &[SurfaceSample], b: &[SurfaceSample], bp: &[Vec3]| {
            a.iter()
                .map(|s| s.normal.dot(&b[brute_nearest(&s.point, bp).0].normal).abs())
                .sum::<f64>()
                / a.len() as f64
        };
        let want_nc = 0.5 * nc_side(&sp, &sq, &q) + 0.5 * nc_side(&sq, &sp, &p);
        worst = worst.max((normal_consistency(&sp, &sq)? - want_nc).abs());

        let cells = r.random_range(1..200);
        let a: Vec<bool> = (0..cells).map(|_| r.random_bool(0.5)).collect();
        let b: Vec<bool> = (0..cells).map(|_| r.random_bool(0.5)).collect();
        let inter = (0..cells).filter(|&i| a[i] && b[i]).count();
        let union = (0..cells).filter(|&i| a[i] || b[i]).count();
        let want_iou = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        ensure!(iou(&a, &b)? == want_iou, "pair {pair}: iou differs");
    }
    ensure!(worst <= 1e-12, "largest deviation {worst:.2e}");
    Ok(format!(
        "100 pairs, largest deviation from brute force {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 8. Marching cubes

fn marching_cubes_fidelity() -> Result<String> {
    let mut worst_radius: f64 = 0.0;
    for (m, r) in [(32, 0.3), (64, 0.3), (64, 0.17)] {
        let h = 1.0 / m as f64;
        let iso = marching_cubes(&analytic_sdf(&AnalyticShape::Sphere { radius: r }, m), 0.0);
        ensure!(!iso.empty, "empty sphere surface");
        for v in &iso.mesh.vertices {
            let dev = (v.norm() - r).abs();
            ensure!(
                dev <= h,
                "vertex radius {} outside [{}, {}]",
                v.norm(),
                r - h,
                r + h
            );
            worst_radius = worst_radius.max(dev / h);
        }
    }
    let m = 64;
    let h = 1.0 / m as f64;
    let mut worst = 0.0f64;
    for mesh in [
        icosphere(0.3, 4),
        box_mesh(Vec3::new(0.3, 0.15, 0.2)),
        capsule_mesh(0.12, 0.25, 48, 12),
    ] {
        let grid = compute_sdf(&mesh, m, &Aabb::cube(0.5))?;
        let iso = marching_cubes(&grid, 0.0);
        let a: Vec<Vec3> = sample_surface(&mesh, 3000, 1)?
            .iter()
            .map(|s| s.point)
            .collect();
        let b: Vec<Vec3> = surface_points(&iso, 3000, 2)?
            .iter()
            .map(|s| s.point)
            .collect();
        let cd = chamfer(&a, &b)?;
        ensure!(cd < 2.0 * h, "round-trip chamfer {cd:.2e} >= 2h");
        worst = worst.max(cd);
    }
    Ok(format!(
        "vertex radii within {worst_radius:.2}h, worst round-trip chamfer {:.2}h at M = 64",
        worst / h
    ))
}

// ---------------------------------------------------------------------------
// 9. Decode scaling

fn decode_scaling() -> Result<String> {
    let timings = bench_timings(&[8, 16, 32], &[32, 64], 15)?;
    let t = |k: usize, m: usize| {
        timings
            .iter()
            .find(|x| x.k == k && x.m == m && x.op == "decode")
            .map(|x| x.median_ns as f64)
            .expect("timed")
    };
    let ratio = t(16, 64) / t(16, 32);
    ensure!(
        (5.0..=12.0).contains(&ratio),
        "M 64/32 decode ratio {ratio:.2}"
    );
    let mut slopes = Vec::new();
    for m in [32, 64] {
        for (a, b) in [(8, 16), (16, 32)] {
            let s = t(b, m) / t(a, m);
            ensure!(
                (s / 2.0 - 1.0).abs() <= 0.3,
                "k {a} -> {b} at M = {m} scales by {s:.2}"
            );
            slopes.push(format!("{s:.2}"));
        }
    }
    Ok(format!(
        "M 64/32 ratio {ratio:.2}; doubling k scales by {}",
        slopes.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn run_pipeline(dir: &Path) -> Result<()> {
    fs::write(
        dir.join("enc.toml"),
        "epochs = 3\ndrop_epoch = 2\nclouds_per_shape = 2\n",
    )?;
    let steps: [&[&str]; 6] = [
        &[
            "gen-dataset",
            "--out",
            "ds",
            "--per-family",
            "6",
            "--seed",
            "9",
        ],
        &["sdf", "--dataset", "ds", "--resolution", "16"],
        &[
            "fit",
            "--dataset",
            "ds",
            "--resolution",
            "16",
            "--k",
            "6",
            "--out",
            "fit",
        ],
        &[
            "train-encoder",
            "--config",
            "enc.toml",
            "--dataset",
            "ds",
            "--basis",
            "fit/basis.ebas",
            "--out",
            "enc",
        ],
        &[
            "finetune",
            "--dataset",
            "ds",
            "--basis",
            "fit/basis.ebas",
            "--epochs",
            "3",
            "--out",
            "ft",
        ],
        &[
            "experiment",
            "--dataset",
            "ds",
            "--basis",
            "fit/basis.ebas",
            "--finetuned",
            "ft/basis.ebas",
            "--encoder",
            "enc/encoder.eenc",
            "--task",
            "completion",
            "--n-points",
            "500",
            "--out",
            "ex",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_eigensdf"))
            .args(args)
            .current_dir(dir)
            .output()?;
        ensure!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(())
}

fn outputs(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("csv" | "json" | "ebas" | "eenc" | "esdf" | "obj")
            ) {
                let rel = path.strip_prefix(dir)?.to_string_lossy().into_owned();
                files.push((rel, fs::read(&path)?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Result<String> {
    let a = TempDir::new()?;
    let b = TempDir::new()?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (fa, fb) = (outputs(a.path())?, outputs(b.path())?);
    ensure!(
        fa.len() == fb.len(),
        "{} vs {} output files",
        fa.len(),
        fb.len()
    );
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        ensure!(na == nb && da == db, "{na} differs between reruns");
    }
    let tabular = fa
        .iter()
        .filter(|(n, _)| n.ends_with(".csv") || n.ends_with(".json"))
        .count();
    Ok(format!(
        "{} files identical across reruns, {tabular} of them CSV or JSON",
        fa.len()
    ))
}

// ---------------------------------------------------------------------------

type Check = fn() -> Result<String>;

fn main() {
    let criteria: [(usize, &str, Option<u64>, Check); 10] = [
        (1, "SDF correctness", Some(30), sdf_correctness),
        (2, "loss gradient", Some(60), loss_gradient),
        (3, "PCA", Some(120), pca),
        (4, "Eckart-Young ordering", Some(600), eckart_young),
        (5, "finetuning gain", Some(900), finetune_gain),
        (6, "completion protocol", Some(1200), completion),
        (7, "metric oracles", Some(30), metric_oracles),
        (
            8,
            "marching cubes fidelity",
            Some(60),
            marching_cubes_fidelity,
        ),
        (9, "decode scaling", Some(120), decode_scaling),
        (10, "determinism", None, determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    // the shared dataset is not charged to any one criterion
    if criteria
        .iter()
        .any(|c| [3, 4, 5, 6].contains(&c.0) && (selected.is_empty() || selected.contains(&c.0)))
    {
        let t = Instant::now();
        desk();
        println!(
            "desk dataset and PCA ready in {:.1} s",
            t.elapsed().as_secs_f64()
        );
    }
    let mut failures = 0;
    for (n, name, budget, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
        let elapsed = t.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > Duration::from_secs(b) => Err(anyhow::anyhow!(
                "took {:.1} s, budget {b} s",
                elapsed.as_secs_f64()
            )),
            (r, _) => r,
        };
        let secs = elapsed.as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {n:>2} {name} ({secs:.1} s): {detail}"),
            Err(e) => {
                failures += 1;
                println!("[FAIL] {n:>2} {name} ({secs:.1} s): {e:#}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
