//! Gradient refinement of a linear decoder with the level-set loss, and the
//! randomly initialized linear autoencoder baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::optim::{Adam, AdamConfig, Schedule};
use crate::pca::{dot, EigenBasis, LatentCode};
use crate::sdfgrid::SdfGrid;
use crate::sdfloss::{self, LossConfig};
use crate::{Error, Result};

/// Losses at or above this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Shapes per optimizer step.
    pub batch: usize,
    pub loss: LossConfig,
    /// Train the mean grid as a bias term.
    pub update_mean: bool,
    /// Also optimize the latent codes instead of keeping them frozen.
    pub train_codes: bool,
}

impl FinetuneConfig {
    /// Desk-scale defaults for an `m`-voxel lattice.
    pub fn for_resolution(m: usize) -> Self {
        FinetuneConfig {
            epochs: 30,
            schedule: Schedule {
                initial: 1e-5,
                drop_epoch: 20,
                dropped: 1e-6,
            },
            adam: AdamConfig::default(),
            batch: 8,
            loss: LossConfig::for_resolution(m),
            update_mean: true,
            train_codes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::OutOfRange("batch must be at least 1".into()));
        }
        self.schedule.validate(self.epochs)?;
        self.adam.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub distance_term: f64,
    pub eikonal_term: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub basis: EigenBasis,
    /// The codes after training; unchanged unless `train_codes` is set.
    pub codes: Vec<LatentCode>,
    pub history: Vec<EpochStats>,
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() || loss.abs() >= DIVERGENCE_LIMIT {
        return Err(Error::Diverged { epoch, step, loss });
    }
    Ok(())
}

/// Minimizes the level-set loss of the decoded shapes over the decoder weights.
pub fn finetune(
    basis: &EigenBasis,
    codes: &[LatentCode],
    truths: &[SdfGrid],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if codes.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: codes.len(),
        });
    }
    let k = basis.k();
    let n = basis.dim();
    for c in codes {
        if c.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: c.len(),
            });
        }
    }
    for t in truths {
        if t.resolution() != basis.resolution() {
            return Err(Error::DimensionMismatch {
                expected: basis.resolution(),
                got: t.resolution(),
            });
        }
    }
    let masks: Vec<Option<Vec<bool>>> = truths
        .iter()
        .map(|t| sdfloss::loss_mask(t, &cfg.loss))
        .collect();

    let mut out = basis.clone();
    out.finetuned = true;
    let mut codes: Vec<LatentCode> = codes.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || truths.is_empty() {
        return Ok(FinetuneOutcome {
            basis: out,
            codes,
            history,
        });
    }

    // parameters: E (k n), then optionally mu (n)
    let mut params: Vec<f64> = out.components.clone();
    if cfg.update_mean {
        params.extend_from_slice(&out.mean);
    }
    let mut opt = Adam::new(params.len(), cfg.adam);
    let mut code_opt = cfg
        .train_codes
        .then(|| Adam::new(codes.len() * k, cfg.adam));
    let mut grad = vec![0.0; params.len()];
    let mut pred = vec![0.0; n];
    let mut point_grad = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..truths.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let rate = cfg.schedule.rate(epoch);
        let (mut loss_sum, mut dist_sum, mut eik_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut code_grads = Vec::new();
            for &s in batch {
                let (e, mu) = params.split_at(k * n);
                let mu = if cfg.update_mean { mu } else { &out.mean[..] };
                decode_into(e, mu, &codes[s], &mut pred);
                let terms = sdfloss::evaluate(
                    &pred,
                    &truths[s].values,
                    &basis.geometry,
                    &cfg.loss,
                    masks[s].as_deref(),
                    Some(&mut point_grad),
                );
                check_loss(terms.total, epoch, step)?;
                loss_sum += terms.total;
                dist_sum += terms.distance;
                eik_sum += terms.eikonal;
                for (i, &c) in codes[s].0.iter().enumerate() {
                    let row = &mut grad[i * n..(i + 1) * n];
                    row.iter_mut()
                        .zip(&point_grad)
                        .for_each(|(g, d)| *g += scale * c * d);
                }
                if cfg.update_mean {
                    grad[k * n..]
                        .iter_mut()
                        .zip(&point_grad)
                        .for_each(|(g, d)| *g += scale * d);
                }
                if cfg.train_codes {
                    let gc: Vec<f64> = (0..k)
                        .map(|i| dot(&e[i * n..(i + 1) * n], &point_grad))
                        .collect();
                    code_grads.push((s, gc));
                }
            }
            opt.step(&mut params, &grad, rate);
            if let Some(co) = code_opt.as_mut() {
                // codes get their own Adam state, one slot per shape
                let mut flat: Vec<f64> = codes.iter().flat_map(|c| c.0.iter().copied()).collect();
                let mut flat_grad = vec![0.0; flat.len()];
                for (s, gc) in code_grads {
                    flat_grad[s * k..(s + 1) * k].copy_from_slice(&gc);
                }
                co.step(&mut flat, &flat_grad, rate);
                for (s, c) in codes.iter_mut().enumerate() {
                    c.0.copy_from_slice(&flat[s * k..(s + 1) * k]);
                }
            }
            if !params.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            step += 1;
        }
        let count = truths.len() as f64;
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / count,
            distance_term: dist_sum / count,
            eikonal_term: eik_sum / count,
        });
    }
    out.components.copy_from_slice(&params[..k * n]);
    if cfg.update_mean {
        out.mean.copy_from_slice(&params[k * n..]);
    }
    Ok(FinetuneOutcome {
        basis: out,
        codes,
        history,
    })
}

/// Level-set loss of one decoded shape and its gradients with respect to
/// the components (row-major `k x n`) and the mean.
pub fn decoder_gradient(
    basis: &EigenBasis,
    code: &LatentCode,
    truth: &SdfGrid,
    loss: &LossConfig,
) -> Result<(sdfloss::LossTerms, Vec<f64>, Vec<f64>)> {
    let pred = basis.decode(code)?;
    let (terms, point_grad) = sdfloss::sdf_loss_grad(&pred, truth, loss)?;
    let grad_e = code
        .0
        .iter()
        .flat_map(|&c| point_grad.iter().map(move |d| c * d))
        .collect();
    Ok((terms, grad_e, point_grad))
}

fn decode_into(components: &[f64], mean: &[f64], code: &LatentCode, out: &mut [f64]) {
    let n = mean.len();
    out.copy_from_slice(mean);
    for (i, &c) in code.0.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        out.iter_mut()
            .zip(&components[i * n..(i + 1) * n])
            .for_each(|(o, e)| *o += c * e);
    }
}

/// Linear encoder `W (phi - mean)` paired with a linear decoder of the
/// same shape as an [`EigenBasis`].
#[derive(Debug, Clone)]
pub struct LinearAutoencoder {
    /// Row-major `k x M^3`.
    pub encoder: Vec<f64>,
    /// Fixed input centering (the training mean).
    pub input_mean: Vec<f64>,
    pub decoder: EigenBasis,
    /// Per-epoch mean squared reconstruction error of the first phase.
    pub mse_history: Vec<f64>,
    /// Level-set finetuning history, when that phase ran.
    pub finetune_history: Vec<EpochStats>,
}

impl LinearAutoencoder {
    pub fn encode(&self, grid: &SdfGrid) -> Result<LatentCode> {
        if grid.values.len() != self.input_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_mean.len(),
                got: grid.values.len(),
            });
        }
        let n = self.input_mean.len();
        let centered: Vec<f64> = grid
            .values
            .iter()
            .zip(&self.input_mean)
            .map(|(a, b)| a - b)
            .collect();
        Ok(LatentCode(
            (0..self.decoder.k())
                .map(|i| dot(&self.encoder[i * n..(i + 1) * n], &centered))
                .collect(),
        ))
    }

    pub fn reconstruct(&self, grid: &SdfGrid) -> Result<SdfGrid> {
        self.decoder.decode(&self.encode(grid)?)
    }

    pub fn reconstruction_mse(&self, grids: &[SdfGrid]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for g in grids {
            let r = self.reconstruct(g)?;
            sum += g
                .values
                .iter()
                .zip(&r.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            count += g.values.len();
        }
        Ok(sum / count.max(1) as f64)
    }

    /// Total trainable weights, matching an eigen basis of the same `k`.
    pub fn decoder_parameter_count(&self) -> usize {
        self.decoder.components.len() + self.decoder.mean.len()
    }
}

/// Trains a linear autoencoder from random weights on reconstruction MSE
/// using the epochs, schedule, optimizer and batch of `cfg`; then, if
/// `level_set` is given, finetunes its decoder on the level-set loss with
/// the encoder frozen.
pub fn train_linear_ae(
    grids: &[SdfGrid],
    k: usize,
    cfg: &FinetuneConfig,
    level_set: Option<&FinetuneConfig>,
    seed: u64,
) -> Result<LinearAutoencoder> {
    cfg.validate()?;
    if grids.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 grids, got {}",
            grids.len()
        )));
    }
    let geometry = grids[0].geometry;
    let n = geometry.len();
    for g in grids {
        if g.resolution() != geometry.resolution {
            return Err(Error::DimensionMismatch {
                expected: geometry.resolution,
                got: g.resolution(),
            });
        }
    }
    if k == 0 {
        return Err(Error::OutOfRange("k must be at least 1".into()));
    }
    let mut input_mean = vec![0.0; n];
    for g in grids {
        input_mean
            .iter_mut()
            .zip(&g.values)
            .for_each(|(m, v)| *m += v);
    }
    input_mean.iter_mut().for_each(|m| *m /= grids.len() as f64);
    let centered: Vec<Vec<f64>> = grids
        .iter()
        .map(|g| {
            g.values
                .iter()
                .zip(&input_mean)
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_std = (1.0 / n as f64).sqrt();
    let dec_std = (1.0 / k as f64).sqrt() * 0.1;
    let enc_dist = Normal::new(0.0, enc_std).expect("positive std");
    let dec_dist = Normal::new(0.0, dec_std).expect("positive std");
    // params: W (k n), E (k n), mu (n)
    let mut params = Vec::with_capacity(2 * k * n + n);
    params.extend((0..k * n).map(|_| enc_dist.sample(&mut rng)));
    params.extend((0..k * n).map(|_| dec_dist.sample(&mut rng)));
    params.extend_from_slice(&input_mean);
    let mut opt = Adam::new(params.len(), cfg.adam);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut code = vec![0.0; k];
    let mut residual = vec![0.0; n];
    let mut mse_history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let rate = cfg.schedule.rate(epoch);
        let mut sq_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 2.0 / (batch.len() * n) as f64;
            for &s in batch {
                let x = &centered[s];
                let (w, rest) = params.split_at(k * n);
                let (e, mu) = rest.split_at(k * n);
                for i in 0..k {
                    code[i] = dot(&w[i * n..(i + 1) * n], x);
                }
                residual.copy_from_slice(mu);
                for i in 0..k {
                    residual
                        .iter_mut()
                        .zip(&e[i * n..(i + 1) * n])
                        .for_each(|(r, ev)| *r += code[i] * ev);
                }
                let mut sq = 0.0;
                for (r, v) in residual.iter_mut().zip(&grids[s].values) {
                    *r -= v;
                    sq += *r * *r;
                }
                sq_sum += sq;
                check_loss(sq / n as f64, epoch, step)?;
                let (gw, grest) = grad.split_at_mut(k * n);
                let (ge, gmu) = grest.split_at_mut(k * n);
                for i in 0..k {
                    let ei = &e[i * n..(i + 1) * n];
                    let gc = scale * dot(ei, &residual);
                    ge[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&residual)
                        .for_each(|(g, r)| *g += scale * code[i] * r);
                    gw[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, xv)| *g += gc * xv);
                }
                gmu.iter_mut()
                    .zip(&residual)
                    .for_each(|(g, r)| *g += scale * r);
            }
            opt.step(&mut params, &grad, rate);
            step += 1;
        }
        mse_history.push(sq_sum / (grids.len() * n) as f64);
    }
    let encoder = params[..k * n].to_vec();
    let decoder = EigenBasis {
        geometry,
        mean: params[2 * k * n..].to_vec(),
        components: params[k * n..2 * k * n].to_vec(),
        eigenvalues: vec![0.0; k],
        finetuned: true,
        total_variance: None,
        samples: grids.len(),
    };
    let mut ae = LinearAutoencoder {
        encoder,
        input_mean,
        decoder,
        mse_history,
        finetune_history: Vec::new(),
    };
    if let Some(ls) = level_set {
        let codes = grids
            .iter()
            .map(|g| ae.encode(g))
            .collect::<Result<Vec<_>>>()?;
        let tuned = finetune(&ae.decoder, &codes, grids, ls, seed.wrapping_add(1))?;
        ae.decoder = tuned.basis;
        ae.finetune_history = tuned.history;
    }
    Ok(ae)
}
