//! Subcommand implementations. Every command resolves its settings from
//! an optional TOML file plus flag overrides, writes its artifacts into an
//! output directory and finishes with a `run.json` manifest there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use eigensdf::bvh::Aabb;
use eigensdf::bvh::Bvh;
use eigensdf::encoders::{
    make_input_pointcloud, rasterize_with, Architecture, Channel, EncoderInput, EncoderModel,
    PointCloudInput, TrainConfig, ViewRaster,
};
use eigensdf::finetune::{finetune, EpochStats, FinetuneConfig};
use eigensdf::mesh::{load_mesh, MeshFormat};
use eigensdf::metrics::{evaluate, evaluate_against, EvalReport, GroundTruth};
use eigensdf::optim::{AdamConfig, Schedule};
use eigensdf::pca::{
    fit_incremental_with, sample_codes, select_k_for_total, EigenBasis, LatentCode,
};
use eigensdf::sdfgrid::{compute_sdf, GridGeometry, SdfGrid};
use eigensdf::sdfloss::{self, DeltaKind, LossConfig};
use eigensdf::surface::marching_cubes;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetConfig, Entry, Split};
use crate::exit::config_error;
use crate::manifest::{write_atomic, write_json, Cell, Csv, RunManifest};

pub const RUN_MANIFEST: &str = "run.json";

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text)
                .map_err(|e| config_error(format!("invalid config {}: {e}", p.display())))
        }
    }
}

macro_rules! override_fields {
    ($cfg:expr, $args:expr, $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
    };
}

fn finish(out: &Path, mut manifest: RunManifest, outputs: &[&str]) -> Result<()> {
    for name in outputs {
        manifest.output(*name, &out.join(name))?;
    }
    manifest.write(&out.join(RUN_MANIFEST))
}

fn mesh_format(path: &Path) -> Result<MeshFormat> {
    MeshFormat::from_path(path)
        .ok_or_else(|| config_error(format!("{} is neither .obj nor .off", path.display())))
}

// ---------------------------------------------------------------------------
// gen-dataset

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    #[arg(long)]
    pub per_family: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

pub fn gen_dataset(args: &GenDatasetArgs) -> Result<()> {
    let mut cfg: DatasetConfig = load_config(args.config.as_deref())?;
    if let Some(names) = &args.families {
        cfg.families = names
            .iter()
            .map(|n| {
                eigensdf::mesh::ShapeFamily::parse(n)
                    .ok_or_else(|| config_error(format!("unknown family {n:?}")))
            })
            .collect::<Result<_>>()?;
    }
    override_fields!(cfg, args, per_family, seed, train_fraction);
    cfg.validate()?;
    let entries = dataset::generate(&cfg, &args.out)?;
    let mut names = vec![dataset::MANIFEST_FILE.to_string()];
    names.extend(entries.iter().map(|e| e.file.clone()));
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let train = entries.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "wrote {} shapes ({train} train / {} test) to {}",
        entries.len(),
        entries.len() - train,
        args.out.display()
    );
    finish(&args.out, RunManifest::new("gen-dataset", &cfg)?, &refs)
}

// ---------------------------------------------------------------------------
// sdf

#[derive(Debug, Args)]
pub struct SdfArgs {
    /// Compute (and cache) grids for every shape of a dataset.
    #[arg(long, conflicts_with = "mesh")]
    pub dataset: Option<PathBuf>,
    /// Compute the grid of a single OBJ or OFF mesh.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Output directory (single-mesh mode) for `grid.esdf`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SdfSettings {
    resolution: usize,
    mesh: Option<String>,
    dataset: Option<String>,
}

pub fn sdf(args: &SdfArgs) -> Result<()> {
    if args.resolution < 8 {
        return Err(config_error(format!(
            "resolution must be at least 8, got {}",
            args.resolution
        )));
    }
    let settings = SdfSettings {
        resolution: args.resolution,
        mesh: args.mesh.as_ref().map(|p| p.display().to_string()),
        dataset: args.dataset.as_ref().map(|p| p.display().to_string()),
    };
    let mut manifest = RunManifest::new("sdf", &settings)?;
    match (&args.dataset, &args.mesh) {
        (Some(root), None) => {
            let ds = Dataset::open(root)?;
            manifest.input("manifest", &ds.manifest_path())?;
            for e in &ds.entries {
                ds.grid(e, args.resolution)?;
            }
            let out = root.join(format!("sdf-{}", args.resolution));
            let names: Vec<String> = ds
                .entries
                .iter()
                .map(|e| format!("{}.esdf", e.id))
                .collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            println!("{} grids in {}", ds.entries.len(), out.display());
            finish(&out, manifest, &refs)
        }
        (None, Some(mesh_path)) => {
            let out = args
                .out
                .clone()
                .ok_or_else(|| config_error("--out is required with --mesh"))?;
            let mesh = load_mesh(mesh_path, mesh_format(mesh_path)?)?;
            manifest.input("mesh", mesh_path)?;
            let grid = compute_sdf(&mesh, args.resolution, &Aabb::cube(0.5))?.quantized();
            write_atomic(&out.join("grid.esdf"), &grid.to_bytes())?;
            finish(&out, manifest, &["grid.esdf"])
        }
        _ => Err(config_error("give exactly one of --dataset or --mesh")),
    }
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub resolution: usize,
    /// Fraction of variance to retain; ignored when `k` is set.
    pub variance_target: f64,
    pub k: Option<usize>,
    /// Rank fitted before selecting `k` by variance.
    pub max_k: usize,
    pub batch_size: usize,
    pub center: bool,
    /// Clamp grid values to `[-band, band]` before fitting.
    pub clamp_band: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            resolution: 32,
            variance_target: 0.995,
            k: None,
            max_k: 64,
            batch_size: 64,
            center: true,
            clamp_band: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for `basis.ebas` and `fit.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub variance_target: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_k: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clamp_band: Option<f64>,
    /// Skip mean-centering before the decomposition.
    #[arg(long)]
    pub no_center: bool,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub k: usize,
    pub resolution: usize,
    pub samples: usize,
    pub retained_variance: f64,
    pub variance_target: Option<f64>,
    pub eigenvalues: Vec<f64>,
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let mut cfg: FitConfig = load_config(args.config.as_deref())?;
    override_fields!(cfg, args, resolution, variance_target, max_k, batch_size);
    if args.k.is_some() {
        cfg.k = args.k;
    }
    if args.no_center {
        cfg.center = false;
    }
    if args.clamp_band.is_some() {
        cfg.clamp_band = args.clamp_band;
    }
    if cfg.clamp_band.is_some_and(|b| !(b > 0.0)) {
        return Err(config_error("clamp_band must be positive"));
    }
    let ds = Dataset::open(&args.dataset)?;
    let train = ds.split(Split::Train);
    let n = train.len();
    let rank = cfg.k.unwrap_or(cfg.max_k.min(n));
    if rank == 0 {
        return Err(config_error("k must be at least 1"));
    }
    if rank > n {
        return Err(config_error(format!(
            "k = {rank} exceeds the {n} training shapes; a basis fitted on N shapes has at most N components"
        )));
    }
    if !(cfg.variance_target > 0.0 && cfg.variance_target <= 1.0) {
        return Err(config_error(format!(
            "variance_target must lie in (0, 1], got {}",
            cfg.variance_target
        )));
    }
    let batch = cfg.batch_size.max(rank);
    let m = cfg.resolution;
    let grids = train.iter().map(|e| {
        let g = ds.grid(e, m).map_err(anyhow_to_core)?;
        Ok(match cfg.clamp_band {
            Some(b) => g.clamped(b),
            None => g,
        })
    });
    let basis = fit_incremental_with(grids, batch, rank, cfg.center)?;
    let total = basis.total_variance.unwrap_or(0.0);
    let (basis, target) = match cfg.k {
        Some(_) => (basis, None),
        None => {
            let k = select_k_for_total(&basis.eigenvalues, total, cfg.variance_target)?;
            (basis.truncated(k)?, Some(cfg.variance_target))
        }
    };
    let report = FitReport {
        k: basis.k(),
        resolution: m,
        samples: n,
        retained_variance: basis.retained_variance().unwrap_or(1.0),
        variance_target: target,
        eigenvalues: basis.eigenvalues.clone(),
    };
    write_atomic(&args.out.join("basis.ebas"), &basis.to_bytes())?;
    write_json(&args.out.join("fit.json"), &report)?;
    println!(
        "k = {} retains {:.6} of the variance over {n} shapes",
        report.k, report.retained_variance
    );
    let mut manifest = RunManifest::new("fit", &cfg)?;
    manifest.input("manifest", &ds.manifest_path())?;
    finish(&args.out, manifest, &["basis.ebas", "fit.json"])
}

fn anyhow_to_core(e: anyhow::Error) -> eigensdf::Error {
    match e.downcast::<eigensdf::Error>() {
        Ok(core) => core,
        Err(other) => eigensdf::Error::Invalid(format!("{other:#}")),
    }
}

// ---------------------------------------------------------------------------
// train-encoder

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Noisy point cloud input.
    Pointcloud,
    /// Single orthographic depth raster.
    View,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub points: usize,
    pub noise_sigma: f64,
    /// Noisy clouds drawn per training shape.
    pub clouds_per_shape: usize,
    pub views: usize,
    pub raster: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub drop_epoch: usize,
    pub dropped_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Pointcloud,
            points: 300,
            noise_sigma: 0.05,
            clouds_per_shape: 4,
            views: 8,
            raster: 32,
            epochs: 60,
            learning_rate: 1e-3,
            drop_epoch: 40,
            dropped_rate: 1e-4,
            batch: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            schedule: Schedule {
                initial: self.learning_rate,
                drop_epoch: self.drop_epoch.min(self.epochs),
                dropped: self.dropped_rate,
            },
            adam: AdamConfig::default(),
            batch: self.batch,
        }
    }

    fn architecture(&self, k: usize) -> Architecture {
        match self.kind {
            EncoderKind::Pointcloud => Architecture::desk_pointnet(k),
            EncoderKind::View => Architecture::desk_view(self.raster, k),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.points == 0 || self.views == 0 || self.raster == 0 || self.clouds_per_shape == 0 {
            return Err(config_error(
                "points, views, raster and clouds_per_shape must be positive",
            ));
        }
        self.train_config().validate()?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Option<EncoderKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Encoder input for one test-time or training sample.
pub enum Sample {
    Cloud(PointCloudInput),
    View(ViewRaster),
}

impl Sample {
    pub fn input(&self) -> EncoderInput<'_> {
        match self {
            Sample::Cloud(c) => EncoderInput::Cloud(c),
            Sample::View(v) => EncoderInput::View(v),
        }
    }
}

/// The evaluation input of a shape: one noisy cloud or one view.
pub fn test_input(ds: &Dataset, e: &Entry, cfg: &EncoderConfig) -> Result<Sample> {
    let mesh = ds.mesh(e)?;
    Ok(match cfg.kind {
        EncoderKind::Pointcloud => Sample::Cloud(make_input_pointcloud(
            &mesh,
            cfg.points,
            cfg.noise_sigma,
            e.sample_seed(),
        )?),
        EncoderKind::View => {
            let az = (e.sample_seed() % cfg.views as u64) as usize;
            Sample::View(rasterize_with(
                &Bvh::build(&mesh),
                az,
                cfg.views,
                cfg.raster,
                Channel::Depth,
            ))
        }
    })
}

fn training_inputs(ds: &Dataset, e: &Entry, cfg: &EncoderConfig) -> Result<Vec<Sample>> {
    let mesh = ds.mesh(e)?;
    Ok(match cfg.kind {
        EncoderKind::Pointcloud => (0..cfg.clouds_per_shape)
            .map(|c| {
                let seed =
                    dataset::splitmix(e.sample_seed() ^ (c as u64 + 1) ^ cfg.seed.rotate_left(17));
                make_input_pointcloud(&mesh, cfg.points, cfg.noise_sigma, seed).map(Sample::Cloud)
            })
            .collect::<eigensdf::Result<_>>()?,
        EncoderKind::View => {
            let bvh = Bvh::build(&mesh);
            (0..cfg.views)
                .map(|az| {
                    Sample::View(rasterize_with(
                        &bvh,
                        az,
                        cfg.views,
                        cfg.raster,
                        Channel::Depth,
                    ))
                })
                .collect()
        }
    })
}

pub struct TrainedEncoder {
    pub model: EncoderModel,
    pub history: Vec<f64>,
}

/// Trains an encoder against the basis codes of the training split.
pub fn train_encoder_on(
    ds: &Dataset,
    basis: &EigenBasis,
    cfg: &EncoderConfig,
) -> Result<TrainedEncoder> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut targets = Vec::new();
    for e in ds.split(Split::Train) {
        let code = basis.encode(&ds.grid(e, basis.resolution())?)?;
        for s in training_inputs(ds, e, cfg)? {
            samples.push(s);
            targets.push(code.clone());
        }
    }
    if samples.is_empty() {
        anyhow::bail!(eigensdf::Error::Invalid(
            "the training split is empty".into()
        ));
    }
    let inputs: Vec<EncoderInput> = samples.iter().map(Sample::input).collect();
    let mut model = EncoderModel::init(cfg.architecture(basis.k()), cfg.seed)?;
    let history = eigensdf::encoders::train_encoder(
        &mut model,
        &inputs,
        &targets,
        &cfg.train_config(),
        cfg.seed,
    )?;
    Ok(TrainedEncoder { model, history })
}

pub fn train_encoder(args: &TrainEncoderArgs) -> Result<()> {
    let mut cfg: EncoderConfig = load_config(args.config.as_deref())?;
    override_fields!(cfg, args, kind, epochs, learning_rate, seed);
    let ds = Dataset::open(&args.dataset)?;
    let basis = EigenBasis::read(&args.basis)?;
    let trained = train_encoder_on(&ds, &basis, &cfg)?;
    write_atomic(&args.out.join("encoder.eenc"), &trained.model.to_bytes())?;
    let mut csv = Csv::new(&["epoch", "mean_loss"]);
    for (i, l) in trained.history.iter().enumerate() {
        csv.row(&[Cell::Int(i as u64), Cell::Float(*l)]);
    }
    csv.write(&args.out.join("history.csv"))?;
    let mut manifest = RunManifest::new("train-encoder", &cfg)?;
    manifest.input("manifest", &ds.manifest_path())?;
    manifest.input("basis", &args.basis)?;
    finish(&args.out, manifest, &["encoder.eenc", "history.csv"])
}

// ---------------------------------------------------------------------------
// finetune

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub drop_epoch: usize,
    pub dropped_rate: f64,
    pub batch: usize,
    /// Delta width in voxels; `epsilon = epsilon_voxels * h`.
    pub epsilon_voxels: f64,
    pub p: u32,
    pub alpha: f64,
    pub delta_kind: DeltaKind,
    /// Eikonal mask band in voxels; unmasked when absent.
    pub mask_band_voxels: Option<f64>,
    pub update_mean: bool,
    pub train_codes: bool,
    pub seed: u64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            epochs: 30,
            learning_rate: 1e-5,
            drop_epoch: 20,
            dropped_rate: 1e-6,
            batch: 8,
            epsilon_voxels: 1.5,
            p: 2,
            alpha: 0.01,
            delta_kind: DeltaKind::Poisson,
            mask_band_voxels: None,
            update_mean: true,
            train_codes: false,
            seed: 0,
        }
    }
}

impl FinetuneSettings {
    pub fn finetune_config(&self, m: usize) -> FinetuneConfig {
        let h = 1.0 / m as f64;
        FinetuneConfig {
            epochs: self.epochs,
            schedule: Schedule {
                initial: self.learning_rate,
                drop_epoch: self.drop_epoch.min(self.epochs),
                dropped: self.dropped_rate,
            },
            adam: AdamConfig::default(),
            batch: self.batch,
            loss: LossConfig {
                epsilon: self.epsilon_voxels * h,
                p: self.p,
                alpha: self.alpha,
                delta_kind: self.delta_kind,
                eikonal_mask_band: self.mask_band_voxels.map(|b| b * h),
            },
            update_mean: self.update_mean,
            train_codes: self.train_codes,
        }
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimize the latent codes together with the decoder.
    #[arg(long)]
    pub joint: bool,
}

pub struct FinetuneRun {
    pub basis: EigenBasis,
    pub history: Vec<EpochStats>,
}

/// Finetunes on the training split with codes from the input basis.
pub fn finetune_on(
    ds: &Dataset,
    basis: &EigenBasis,
    settings: &FinetuneSettings,
) -> Result<FinetuneRun> {
    let m = basis.resolution();
    let mut truths = Vec::new();
    let mut codes = Vec::new();
    for e in ds.split(Split::Train) {
        let g = ds.grid(e, m)?;
        codes.push(basis.encode(&g)?);
        truths.push(g);
    }
    let out = finetune(
        basis,
        &codes,
        &truths,
        &settings.finetune_config(m),
        settings.seed,
    )?;
    Ok(FinetuneRun {
        basis: out.basis,
        history: out.history,
    })
}

pub fn history_csv(history: &[EpochStats]) -> Csv {
    let mut csv = Csv::new(&["epoch", "mean_loss", "distance_term", "eikonal_term"]);
    for h in history {
        csv.row(&[
            Cell::Int(h.epoch as u64),
            Cell::Float(h.mean_loss),
            Cell::Float(h.distance_term),
            Cell::Float(h.eikonal_term),
        ]);
    }
    csv
}

pub fn finetune_cmd(args: &FinetuneArgs) -> Result<()> {
    let mut cfg: FinetuneSettings = load_config(args.config.as_deref())?;
    override_fields!(cfg, args, epochs, learning_rate, alpha, seed);
    if args.joint {
        cfg.train_codes = true;
    }
    let ds = Dataset::open(&args.dataset)?;
    let basis = EigenBasis::read(&args.basis)?;
    cfg.finetune_config(basis.resolution()).validate()?;
    let run = finetune_on(&ds, &basis, &cfg)?;
    write_atomic(&args.out.join("basis.ebas"), &run.basis.to_bytes())?;
    history_csv(&run.history).write(&args.out.join("history.csv"))?;
    if let (Some(first), Some(last)) = (run.history.first(), run.history.last()) {
        println!("mean loss {:.6} -> {:.6}", first.mean_loss, last.mean_loss);
    }
    let mut manifest = RunManifest::new("finetune", &cfg)?;
    manifest.input("manifest", &ds.manifest_path())?;
    manifest.input("basis", &args.basis)?;
    finish(&args.out, manifest, &["basis.ebas", "history.csv"])
}

// ---------------------------------------------------------------------------
// experiment

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Depth raster to code to grid.
    Singleview,
    /// Noisy point cloud to code to grid.
    Completion,
    /// Direct projection onto the basis.
    Autoencode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub split: Split,
    pub n_points: usize,
    pub tau: f64,
    /// Encoder settings used to build inputs, and to train when no
    /// encoder file is given.
    pub encoder: EncoderConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Autoencode,
            split: Split::Test,
            n_points: 2000,
            tau: eigensdf::metrics::DEFAULT_TAU,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub basis: PathBuf,
    /// Finetuned basis decoded from the same codes for a paired comparison.
    #[arg(long)]
    pub finetuned: Option<PathBuf>,
    /// Trained encoder; trained in-run when absent.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct Means {
    pub iou: f64,
    pub chamfer: f64,
    pub nc: f64,
    pub fscore: f64,
}

impl Means {
    pub fn of(reports: &[EvalReport]) -> Means {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Means {
            iou: sum(|r| r.iou),
            chamfer: sum(|r| r.chamfer),
            nc: sum(|r| r.normal_consistency),
            fscore: sum(|r| r.fscore),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub task: Task,
    pub shapes: usize,
    pub means: Means,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetuned_means: Option<Means>,
    pub config: ExperimentConfig,
}

pub struct ShapeResult {
    pub id: String,
    pub family: String,
    pub code: LatentCode,
    pub report: EvalReport,
    pub finetuned: Option<EvalReport>,
}

/// Ground truth used for scoring a dataset shape.
pub fn ground_truth(
    ds: &Dataset,
    e: &Entry,
    m: usize,
    n_points: usize,
) -> Result<(SdfGrid, GroundTruth)> {
    let grid = ds.grid(e, m)?;
    let gt = GroundTruth::new(&ds.mesh(e)?, &grid, n_points, e.sample_seed())?;
    Ok((grid, gt))
}

/// Runs the per-shape protocol of an experiment.
pub fn run_experiment(
    ds: &Dataset,
    basis: &EigenBasis,
    finetuned: Option<&EigenBasis>,
    encoder: Option<&EncoderModel>,
    cfg: &ExperimentConfig,
) -> Result<Vec<ShapeResult>> {
    if let Some(ft) = finetuned {
        if ft.resolution() != basis.resolution() || ft.k() != basis.k() {
            anyhow::bail!(eigensdf::Error::DimensionMismatch {
                expected: basis.k(),
                got: ft.k()
            });
        }
    }
    let m = basis.resolution();
    let mut out = Vec::new();
    for e in ds.split(cfg.split) {
        let (grid, gt) = ground_truth(ds, e, m, cfg.n_points)?;
        let code = match cfg.task {
            Task::Autoencode => basis.encode(&grid)?,
            Task::Completion | Task::Singleview => {
                let model = encoder.ok_or_else(|| config_error("this task needs an encoder"))?;
                let mut enc_cfg = cfg.encoder.clone();
                enc_cfg.kind = if cfg.task == Task::Completion {
                    EncoderKind::Pointcloud
                } else {
                    EncoderKind::View
                };
                model.forward(&test_input(ds, e, &enc_cfg)?.input())?
            }
        };
        let seed = e.sample_seed();
        let report = evaluate_against(&basis.decode(&code)?, &gt, cfg.tau, seed)?;
        let finetuned = finetuned
            .map(|ft| evaluate_against(&ft.decode(&code)?, &gt, cfg.tau, seed))
            .transpose()?;
        out.push(ShapeResult {
            id: e.id.clone(),
            family: e.family.name().to_string(),
            code,
            report,
            finetuned,
        });
    }
    Ok(out)
}

pub fn experiment(args: &ExperimentArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = load_config(args.config.as_deref())?;
    override_fields!(cfg, args, task, n_points, tau);
    if !(cfg.tau > 0.0) || cfg.n_points == 0 {
        return Err(config_error("tau and n_points must be positive"));
    }
    let ds = Dataset::open(&args.dataset)?;
    let basis = EigenBasis::read(&args.basis)?;
    let finetuned = args
        .finetuned
        .as_deref()
        .map(EigenBasis::read)
        .transpose()?;
    let mut manifest = RunManifest::new("experiment", &cfg)?;
    manifest.input("manifest", &ds.manifest_path())?;
    manifest.input("basis", &args.basis)?;
    if let Some(p) = &args.finetuned {
        manifest.input("finetuned", p)?;
    }
    cfg.encoder.kind = match cfg.task {
        Task::Singleview => EncoderKind::View,
        _ => EncoderKind::Pointcloud,
    };
    let mut outputs = vec!["results.csv", "summary.json"];
    let encoder = match (cfg.task, &args.encoder) {
        (Task::Autoencode, _) => None,
        (_, Some(p)) => {
            manifest.input("encoder", p)?;
            Some(EncoderModel::read(p)?)
        }
        (_, None) => {
            let trained = train_encoder_on(&ds, &basis, &cfg.encoder)?;
            write_atomic(&args.out.join("encoder.eenc"), &trained.model.to_bytes())?;
            outputs.push("encoder.eenc");
            Some(trained.model)
        }
    };
    let results = run_experiment(&ds, &basis, finetuned.as_ref(), encoder.as_ref(), &cfg)?;
    let mut header = vec!["id", "family", "iou", "chamfer", "nc", "fscore", "empty"];
    if finetuned.is_some() {
        header.extend(["ft_iou", "ft_chamfer", "ft_nc", "ft_fscore", "ft_empty"]);
    }
    let mut csv = Csv::new(&header);
    for r in &results {
        let mut cells = vec![Cell::Str(&r.id), Cell::Str(&r.family)];
        for rep in std::iter::once(&r.report).chain(r.finetuned.as_ref()) {
            cells.extend([
                Cell::Float(rep.iou),
                Cell::Float(rep.chamfer),
                Cell::Float(rep.normal_consistency),
                Cell::Float(rep.fscore),
                Cell::Int(rep.empty_prediction as u64),
            ]);
        }
        csv.row(&cells);
    }
    csv.write(&args.out.join("results.csv"))?;
    let reports: Vec<EvalReport> = results.iter().map(|r| r.report).collect();
    let ft_reports: Option<Vec<EvalReport>> = results.iter().map(|r| r.finetuned).collect();
    let summary = Summary {
        task: cfg.task,
        shapes: results.len(),
        means: Means::of(&reports),
        finetuned_means: ft_reports
            .filter(|_| finetuned.is_some())
            .map(|r| Means::of(&r)),
        config: cfg.clone(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{:?}: iou {:.4} chamfer {:.5} nc {:.4} fscore {:.4} over {} shapes",
        cfg.task,
        summary.means.iou,
        summary.means.chamfer,
        summary.means.nc,
        summary.means.fscore,
        summary.shapes
    );
    finish(&args.out, manifest, &outputs)
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decode the zero code (the mean shape) instead of sampling.
    #[arg(long)]
    pub zero: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SampleSettings {
    count: usize,
    seed: u64,
    zero: bool,
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let basis = EigenBasis::read(&args.basis)?;
    let codes = if args.zero {
        vec![LatentCode::zeros(basis.k()); args.count]
    } else {
        sample_codes(&basis, args.count, args.seed)?
    };
    let mut names = Vec::new();
    let mut header = vec!["sample".to_string()];
    header.extend((0..basis.k()).map(|i| format!("c{i}")));
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, code) in codes.iter().enumerate() {
        let grid = basis.decode(code)?;
        let surface = marching_cubes(&grid, 0.0);
        let (g, o) = (format!("sample-{i:03}.esdf"), format!("sample-{i:03}.obj"));
        write_atomic(&args.out.join(&g), &grid.to_bytes())?;
        write_atomic(&args.out.join(&o), surface.mesh.to_obj_string().as_bytes())?;
        let mut cells = vec![Cell::Int(i as u64)];
        cells.extend(code.0.iter().map(|c| Cell::Float(*c)));
        csv.row(&cells);
        names.push(g);
        names.push(o);
    }
    csv.write(&args.out.join("codes.csv"))?;
    names.push("codes.csv".into());
    let settings = SampleSettings {
        count: args.count,
        seed: args.seed,
        zero: args.zero,
    };
    let mut manifest = RunManifest::new("sample", &settings)?;
    manifest.input("basis", &args.basis)?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    finish(&args.out, manifest, &refs)
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub resolutions: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub k: usize,
    pub m: usize,
    pub op: &'static str,
    pub median_ns: u128,
    pub repeats: usize,
}

/// A deterministic, non-orthonormal stand-in basis for timing.
pub fn bench_basis(k: usize, m: usize) -> EigenBasis {
    let geometry = GridGeometry::unit_box(m);
    let n = geometry.len();
    let mean = (0..n)
        .map(|i| geometry.center_of(i).norm() - 0.3)
        .map(|v| -v)
        .collect();
    let components = (0..k * n)
        .map(|i| ((i % 7919) as f64 * 0.37).sin() * 1e-2)
        .collect();
    EigenBasis {
        geometry,
        mean,
        components,
        eigenvalues: (0..k).map(|i| 1.0 / (i + 1) as f64).collect(),
        finetuned: false,
        total_variance: None,
        samples: 0,
    }
}

/// Bytes written between repeats to push the operands out of every cache level.
const EVICTION_BYTES: usize = 256 << 20;

fn evict(buf: &mut [u8]) {
    for line in buf.chunks_mut(64) {
        line[0] = line[0].wrapping_add(1);
    }
    std::hint::black_box(buf);
}

/// Median over `repeats` cold-cache runs, so small and large grids are both
/// timed streaming from memory.
fn median_ns(repeats: usize, buf: &mut [u8], mut f: impl FnMut()) -> u128 {
    f();
    let mut times: Vec<u128> = (0..repeats)
        .map(|_| {
            evict(buf);
            let t = Instant::now();
            f();
            t.elapsed().as_nanos()
        })
        .collect();
    times.sort_unstable();
    times[times.len() / 2]
}

/// Median wall time of one decode and of one loss-gradient evaluation per `(k, M)`.
pub fn bench_timings(ks: &[usize], resolutions: &[usize], repeats: usize) -> Result<Vec<Timing>> {
    if repeats == 0
        || ks.is_empty()
        || resolutions.is_empty()
        || ks.contains(&0)
        || resolutions.iter().any(|&m| m < 2)
    {
        return Err(config_error(
            "bench needs positive ks, resolutions of at least 2 and repeats",
        ));
    }
    let mut buf = vec![0u8; EVICTION_BYTES];
    let mut out = Vec::new();
    for &m in resolutions {
        for &k in ks {
            let basis = bench_basis(k, m);
            let code = LatentCode((0..k).map(|i| 0.5 / (i + 1) as f64).collect());
            let decode_ns = median_ns(repeats, &mut buf, || {
                std::hint::black_box(
                    basis
                        .decode(std::hint::black_box(&code))
                        .expect("matching k"),
                );
            });
            out.push(Timing {
                k,
                m,
                op: "decode",
                median_ns: decode_ns,
                repeats,
            });
            let truth = SdfGrid {
                geometry: basis.geometry,
                values: basis.mean.clone(),
            };
            let cfg = LossConfig::for_resolution(m);
            let grad_ns = median_ns(repeats, &mut buf, || {
                let pred = basis.decode(&code).expect("matching k");
                std::hint::black_box(
                    sdfloss::sdf_loss_grad(&pred, &truth, &cfg).expect("valid grids"),
                );
            });
            out.push(Timing {
                k,
                m,
                op: "loss_grad",
                median_ns: grad_ns,
                repeats,
            });
        }
    }
    Ok(out)
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let timings = bench_timings(&args.ks, &args.resolutions, args.repeats)?;
    let mut csv = Csv::new(&["k", "M", "op", "median_ns", "repeats"]);
    for t in &timings {
        csv.row(&[
            Cell::Int(t.k as u64),
            Cell::Int(t.m as u64),
            Cell::Str(t.op),
            Cell::Int(t.median_ns as u64),
            Cell::Int(t.repeats as u64),
        ]);
    }
    csv.write(&args.out.join("bench.csv"))?;
    print!("{}", csv.as_str());
    #[derive(Serialize)]
    struct Settings<'a> {
        ks: &'a [usize],
        resolutions: &'a [usize],
        repeats: usize,
    }
    let manifest = RunManifest::new(
        "bench",
        &Settings {
            ks: &args.ks,
            resolutions: &args.resolutions,
            repeats: args.repeats,
        },
    )?;
    finish(&args.out, manifest, &["bench.csv"])
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted grid (ESDF).
    #[arg(long)]
    pub grid: PathBuf,
    /// Ground-truth mesh (OBJ or OFF).
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n_points: usize,
    #[arg(long, default_value_t = eigensdf::metrics::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalSettings {
    n_points: usize,
    tau: f64,
    seed: u64,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let grid = SdfGrid::read(&args.grid)?;
    let mesh = load_mesh(&args.mesh, mesh_format(&args.mesh)?)?;
    let report = evaluate(&grid, &mesh, args.n_points, args.tau, args.seed)?;
    write_json(&args.out.join("report.json"), &report)?;
    println!(
        "iou {:.4} chamfer {:.5} nc {:.4} fscore {:.4}{}",
        report.iou,
        report.chamfer,
        report.normal_consistency,
        report.fscore,
        if report.empty_prediction {
            " (empty prediction)"
        } else {
            ""
        }
    );
    let mut manifest = RunManifest::new(
        "eval",
        &EvalSettings {
            n_points: args.n_points,
            tau: args.tau,
            seed: args.seed,
        },
    )?;
    manifest.input("grid", &args.grid)?;
    manifest.input("mesh", &args.mesh)?;
    finish(&args.out, manifest, &["report.json"])
}
