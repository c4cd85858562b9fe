//! Adam over flat parameter vectors and a one-drop learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial: f64,
    /// First epoch (0-based) that uses `dropped`.
    pub drop_epoch: usize,
    pub dropped: f64,
}

impl Schedule {
    pub fn constant(rate: f64) -> Self {
        Schedule {
            initial: rate,
            drop_epoch: usize::MAX,
            dropped: rate,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch {
            self.dropped
        } else {
            self.initial
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.initial >= 0.0 && self.dropped >= 0.0)
            || !self.initial.is_finite()
            || !self.dropped.is_finite()
        {
            return Err(Error::OutOfRange(
                "learning rates must be finite and nonnegative".into(),
            ));
        }
        if self.drop_epoch != usize::MAX && self.drop_epoch > epochs {
            return Err(Error::OutOfRange(format!(
                "drop epoch {} is past the last epoch {epochs}",
                self.drop_epoch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::OutOfRange(
                "Adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected step. A zero rate leaves `params` untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], rate: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            if rate != 0.0 {
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                params[i] -= rate * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops() {
        let s = Schedule {
            initial: 1e-3,
            drop_epoch: 30,
            dropped: 1e-4,
        };
        assert_eq!(s.rate(29), 1e-3);
        assert_eq!(s.rate(30), 1e-4);
        assert!(s.validate(20).is_err());
        assert!(s.validate(40).is_ok());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut x = vec![1.0, 2.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        opt.step(&mut x, &[5.0, -5.0], 0.0);
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
