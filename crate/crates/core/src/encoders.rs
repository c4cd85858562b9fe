//! Small networks that regress latent codes: a point-cloud encoder (shared
//! per-point layers, max pooling, head) and an MLP over a depth raster.
//! Backpropagation is written out by hand.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bvh::Bvh;
use crate::mesh::{sample_surface, TriangleMesh};
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::pca::LatentCode;
use crate::sdfgrid::ByteReader;
use crate::{Error, Result, Vec3};

const MODEL_MAGIC: &[u8; 4] = b"EENC";
const MODEL_VERSION: u32 = 1;

/// Depth value stored for pixels whose ray misses the mesh.
pub const MISS: f64 = -1.0;
/// Distance from the origin to the orthographic image plane.
pub const CAMERA_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudInput {
    pub points: Vec<Vec3>,
    pub n_sampled: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Area-weighted surface samples with iid Gaussian noise of std `sigma`
/// on every coordinate.
pub fn make_input_pointcloud(
    mesh: &TriangleMesh,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<PointCloudInput> {
    if n == 0 {
        return Err(Error::OutOfRange(
            "point cloud needs at least one point".into(),
        ));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "noise sigma must be nonnegative, got {sigma}"
        )));
    }
    let samples = sample_surface(mesh, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6521);
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("positive sigma"));
    let points = samples
        .iter()
        .map(|s| match &noise {
            Some(d) => {
                s.point + Vec3::new(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng))
            }
            None => s.point,
        })
        .collect();
    Ok(PointCloudInput {
        points,
        n_sampled: n,
        noise_sigma: sigma,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Depth,
    Silhouette,
}

/// Orthographic `R x R` image, row 0 at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRaster {
    pub resolution: usize,
    pub values: Vec<f64>,
    pub channel: Channel,
    pub azimuth: usize,
    pub views: usize,
}

impl ViewRaster {
    /// Network input: `2 - depth` on hits and 0 on misses for depth
    /// rasters, the mask itself for silhouettes.
    pub fn features(&self) -> Vec<f64> {
        match self.channel {
            Channel::Depth => self
                .values
                .iter()
                .map(|&d| if d == MISS { 0.0 } else { 2.0 - d })
                .collect(),
            Channel::Silhouette => self.values.clone(),
        }
    }
}

/// Camera position and image axes for view `azimuth` of `views` equally
/// spaced angles about the y axis.
pub fn camera_frame(azimuth: usize, views: usize) -> (Vec3, Vec3, Vec3) {
    let theta = 2.0 * std::f64::consts::PI * (azimuth % views) as f64 / views as f64;
    let eye = Vec3::new(theta.sin(), 0.0, theta.cos()) * CAMERA_DISTANCE;
    let right = Vec3::new(theta.cos(), 0.0, -theta.sin());
    (eye, right, Vec3::y())
}

/// Renders one orthographic view of a unit-box mesh by casting one ray per pixel.
pub fn rasterize_view(
    mesh: &TriangleMesh,
    azimuth: usize,
    views: usize,
    resolution: usize,
    channel: Channel,
) -> Result<ViewRaster> {
    if views == 0 || resolution == 0 {
        return Err(Error::OutOfRange(
            "views and resolution must be positive".into(),
        ));
    }
    mesh.check_watertight()?;
    let bvh = Bvh::build(mesh);
    Ok(rasterize_with(&bvh, azimuth, views, resolution, channel))
}

pub fn rasterize_with(
    bvh: &Bvh,
    azimuth: usize,
    views: usize,
    resolution: usize,
    channel: Channel,
) -> ViewRaster {
    let (eye, right, up) = camera_frame(azimuth, views);
    let dir = -eye.normalize();
    let mut values = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        let v = -0.5 + (row as f64 + 0.5) / resolution as f64;
        for col in 0..resolution {
            let u = -0.5 + (col as f64 + 0.5) / resolution as f64;
            let origin = eye + right * u + up * v;
            let hit = bvh.first_hit(&origin, &dir);
            values.push(match (channel, hit) {
                (Channel::Depth, Some(t)) => t,
                (Channel::Depth, None) => MISS,
                (Channel::Silhouette, Some(_)) => 1.0,
                (Channel::Silhouette, None) => 0.0,
            });
        }
    }
    ViewRaster {
        resolution,
        values,
        channel,
        azimuth: azimuth % views,
        views,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Widths of the shared per-point stack starting at 3, then of the
    /// head starting at the pooled width and ending at `k`.
    PointNet {
        per_point: Vec<usize>,
        head: Vec<usize>,
    },
    /// Widths starting at `R * R` and ending at `k`.
    ViewMlp {
        layers: Vec<usize>,
        channel: Channel,
    },
}

impl Architecture {
    pub fn pointnet(per_point: &[usize], head: &[usize]) -> Self {
        Architecture::PointNet {
            per_point: per_point.to_vec(),
            head: head.to_vec(),
        }
    }

    /// Desk-scale point-cloud encoder for `k` outputs.
    pub fn desk_pointnet(k: usize) -> Self {
        Self::pointnet(&[3, 64, 128, 64], &[64, k])
    }

    /// Desk-scale raster encoder for `k` outputs.
    pub fn desk_view(resolution: usize, k: usize) -> Self {
        Architecture::ViewMlp {
            layers: vec![resolution * resolution, 128, 64, k],
            channel: Channel::Depth,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Architecture::PointNet { head, .. } => *head.last().unwrap_or(&0),
            Architecture::ViewMlp { layers, .. } => *layers.last().unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let chain_ok = |w: &[usize]| w.len() >= 2 && w.iter().all(|&x| x > 0);
        match self {
            Architecture::PointNet { per_point, head } => {
                if !chain_ok(per_point)
                    || !chain_ok(head)
                    || per_point[0] != 3
                    || per_point.last() != head.first()
                {
                    return Err(Error::Invalid(format!(
                        "point-cloud widths do not chain: {per_point:?} then {head:?}"
                    )));
                }
            }
            Architecture::ViewMlp { layers, .. } => {
                if !chain_ok(layers) {
                    return Err(Error::Invalid(format!(
                        "raster widths do not chain: {layers:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn stacks(&self) -> (Vec<Layer>, Vec<Layer>) {
        match self {
            Architecture::PointNet { per_point, head } => {
                let a = layout(per_point, 0);
                let off = a.last().map_or(0, |l| l.end());
                (a, layout(head, off))
            }
            Architecture::ViewMlp { layers, .. } => (Vec::new(), layout(layers, 0)),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let (a, b) = self.stacks();
        b.last().or(a.last()).map_or(0, |l| l.end())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inp: usize,
    out: usize,
    offset: usize,
}

impl Layer {
    fn bias(&self) -> usize {
        self.offset + self.inp * self.out
    }

    fn end(&self) -> usize {
        self.bias() + self.out
    }
}

fn layout(widths: &[usize], mut offset: usize) -> Vec<Layer> {
    widths
        .windows(2)
        .map(|w| {
            let l = Layer {
                inp: w[0],
                out: w[1],
                offset,
            };
            offset = l.end();
            l
        })
        .collect()
}

/// Post-activation values of every layer, input first.
fn stack_forward(params: &[f64], layers: &[Layer], x: &[f64], relu_last: bool) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for (li, l) in layers.iter().enumerate() {
        let input = &acts[li];
        let w = &params[l.offset..l.bias()];
        let b = &params[l.bias()..l.end()];
        let relu = relu_last || li + 1 < layers.len();
        let out: Vec<f64> = (0..l.out)
            .map(|o| {
                let row = &w[o * l.inp..(o + 1) * l.inp];
                let v = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect();
        acts.push(out);
    }
    acts
}

/// Accumulates parameter gradients and returns the gradient at the input.
fn stack_backward(
    params: &[f64],
    layers: &[Layer],
    acts: &[Vec<f64>],
    grad_out: &[f64],
    relu_last: bool,
    grad: &mut [f64],
) -> Vec<f64> {
    let mut upstream = grad_out.to_vec();
    for li in (0..layers.len()).rev() {
        let l = layers[li];
        let relu = relu_last || li + 1 < layers.len();
        if relu {
            for (u, a) in upstream.iter_mut().zip(&acts[li + 1]) {
                if *a <= 0.0 {
                    *u = 0.0;
                }
            }
        }
        let input = &acts[li];
        let mut down = vec![0.0; l.inp];
        for o in 0..l.out {
            let u = upstream[o];
            if u == 0.0 {
                continue;
            }
            let wrow = l.offset + o * l.inp;
            for i in 0..l.inp {
                grad[wrow + i] += u * input[i];
                down[i] += u * params[wrow + i];
            }
            grad[l.bias() + o] += u;
        }
        upstream = down;
    }
    upstream
}

pub enum EncoderInput<'a> {
    Cloud(&'a PointCloudInput),
    View(&'a ViewRaster),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub architecture: Architecture,
    pub params: Vec<f64>,
}

impl EncoderModel {
    pub fn zeros(architecture: Architecture) -> Result<Self> {
        architecture.validate()?;
        let n = architecture.parameter_count();
        Ok(EncoderModel {
            architecture,
            params: vec![0.0; n],
        })
    }

    /// He initialization (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(architecture)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = model.architecture.stacks();
        for l in a.iter().chain(&b) {
            let d = Normal::new(0.0, (2.0 / l.inp as f64).sqrt()).expect("positive std");
            for w in &mut model.params[l.offset..l.bias()] {
                *w = d.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.architecture.output_len()
    }

    fn check_input(&self, input: &EncoderInput) -> Result<()> {
        match (&self.architecture, input) {
            (Architecture::PointNet { .. }, EncoderInput::Cloud(c)) => {
                if c.points.is_empty() {
                    return Err(Error::Invalid("empty point cloud".into()));
                }
                Ok(())
            }
            (Architecture::ViewMlp { layers, channel }, EncoderInput::View(v)) => {
                if v.values.len() != layers[0] {
                    return Err(Error::DimensionMismatch {
                        expected: layers[0],
                        got: v.values.len(),
                    });
                }
                if v.channel != *channel {
                    return Err(Error::Invalid(
                        "raster channel does not match the model".into(),
                    ));
                }
                Ok(())
            }
            _ => Err(Error::Invalid(
                "input kind does not match the encoder".into(),
            )),
        }
    }

    pub fn forward(&self, input: &EncoderInput) -> Result<LatentCode> {
        self.check_input(input)?;
        let (per_point, head) = self.architecture.stacks();
        let out = match input {
            EncoderInput::Cloud(c) => {
                let (pooled, _) = self.pool(&per_point, c);
                stack_forward(&self.params, &head, &pooled, false)
                    .pop()
                    .unwrap()
            }
            EncoderInput::View(v) => stack_forward(&self.params, &head, &v.features(), false)
                .pop()
                .unwrap(),
        };
        Ok(LatentCode(out))
    }

    /// Coordinatewise max of the per-point features and, per channel, the
    /// winning point (lowest index on ties).
    fn pool(&self, per_point: &[Layer], cloud: &PointCloudInput) -> (Vec<f64>, Vec<usize>) {
        let width = per_point.last().map_or(3, |l| l.out);
        let mut pooled = vec![f64::NEG_INFINITY; width];
        let mut arg = vec![0usize; width];
        for (pi, p) in cloud.points.iter().enumerate() {
            let acts = stack_forward(&self.params, per_point, p.as_slice(), true);
            for (c, &v) in acts.last().unwrap().iter().enumerate() {
                if v > pooled[c] {
                    pooled[c] = v;
                    arg[c] = pi;
                }
            }
        }
        (pooled, arg)
    }

    /// Output plus `grad += d(upstream . output)/d params`.
    pub fn backward(
        &self,
        input: &EncoderInput,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<LatentCode> {
        self.check_input(input)?;
        if upstream.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: upstream.len(),
            });
        }
        let (per_point, head) = self.architecture.stacks();
        match input {
            EncoderInput::Cloud(c) => {
                let (pooled, arg) = self.pool(&per_point, c);
                let acts = stack_forward(&self.params, &head, &pooled, false);
                let out = acts.last().unwrap().clone();
                let g_pooled = stack_backward(&self.params, &head, &acts, upstream, false, grad);
                // route each pooled channel to its winning point only
                let mut winners: Vec<usize> = arg.clone();
                winners.sort_unstable();
                winners.dedup();
                for pi in winners {
                    let g_point: Vec<f64> = (0..g_pooled.len())
                        .map(|ch| if arg[ch] == pi { g_pooled[ch] } else { 0.0 })
                        .collect();
                    let pacts =
                        stack_forward(&self.params, &per_point, c.points[pi].as_slice(), true);
                    stack_backward(&self.params, &per_point, &pacts, &g_point, true, grad);
                }
                Ok(LatentCode(out))
            }
            EncoderInput::View(v) => {
                let acts = stack_forward(&self.params, &head, &v.features(), false);
                let out = acts.last().unwrap().clone();
                stack_backward(&self.params, &head, &acts, upstream, false, grad);
                Ok(LatentCode(out))
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let (kind, channel, first, second): (u8, u8, &[usize], &[usize]) = match &self.architecture
        {
            Architecture::PointNet { per_point, head } => (0, 0, per_point, head),
            Architecture::ViewMlp { layers, channel } => {
                (1, (*channel == Channel::Silhouette) as u8, layers, &[])
            }
        };
        out.push(kind);
        out.push(channel);
        for widths in [first, second] {
            out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
            for &w in widths {
                out.extend_from_slice(&(w as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("missing EENC magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported encoder version {version}"
            )));
        }
        let kind = r.u8()?;
        let channel = match r.u8()? {
            0 => Channel::Depth,
            1 => Channel::Silhouette,
            c => return Err(Error::Format(format!("bad channel {c}"))),
        };
        let read_widths = |r: &mut ByteReader| -> Result<Vec<usize>> {
            let n = r.u32()? as usize;
            if n > 1024 {
                return Err(Error::Format(format!("implausible layer count {n}")));
            }
            (0..n).map(|_| Ok(r.u32()? as usize)).collect()
        };
        let first = read_widths(&mut r)?;
        let second = read_widths(&mut r)?;
        let architecture = match kind {
            0 => Architecture::PointNet {
                per_point: first,
                head: second,
            },
            1 if second.is_empty() => Architecture::ViewMlp {
                layers: first,
                channel,
            },
            _ => return Err(Error::Format(format!("bad encoder kind {kind}"))),
        };
        architecture
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        if count != architecture.parameter_count() {
            return Err(Error::Format(format!(
                "parameter count {count} does not match the architecture ({})",
                architecture.parameter_count()
            )));
        }
        let params = r.f32_vec(count)?;
        r.finish()?;
        Ok(EncoderModel {
            architecture,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub batch: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::OutOfRange("batch must be at least 1".into()));
        }
        self.schedule.validate(self.epochs)?;
        self.adam.validate()
    }
}

/// Mean squared error over code entries.
pub fn code_mse(
    model: &EncoderModel,
    inputs: &[EncoderInput],
    targets: &[LatentCode],
) -> Result<f64> {
    let mut sum = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let y = model.forward(x)?;
        sum +=
            y.0.iter()
                .zip(&t.0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
    }
    Ok(sum / (inputs.len() * model.k()).max(1) as f64)
}

/// Trains `model` in place on MSE to the target codes. Returns the
/// per-epoch mean training loss.
pub fn train_encoder(
    model: &mut EncoderModel,
    inputs: &[EncoderInput],
    targets: &[LatentCode],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Invalid(format!(
            "need matching nonempty inputs and targets, got {} and {}",
            inputs.len(),
            targets.len()
        )));
    }
    let k = model.k();
    if let Some(t) = targets.iter().find(|t| t.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: t.len(),
        });
    }
    let mut opt = Adam::new(model.params.len(), cfg.adam);
    let mut grad = vec![0.0; model.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let rate = cfg.schedule.rate(epoch);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 2.0 / (batch.len() * k) as f64;
            for &s in batch {
                let y = model.forward(&inputs[s])?;
                let diff: Vec<f64> = y.0.iter().zip(&targets[s].0).map(|(a, b)| a - b).collect();
                sum += diff.iter().map(|d| d * d).sum::<f64>();
                let upstream: Vec<f64> = diff.iter().map(|d| scale * d).collect();
                model.backward(&inputs[s], &upstream, &mut grad)?;
            }
            opt.step(&mut model.params, &grad, rate);
            step += 1;
        }
        let loss = sum / (inputs.len() * k) as f64;
        if !loss.is_finite() || !model.params.iter().all(|p| p.is_finite()) {
            return Err(Error::Diverged { epoch, step, loss });
        }
        history.push(loss);
    }
    Ok(history)
}
