//! SGD with momentum and weight decay under a polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters of [`OptimizerState`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl SgdConfig {
    pub fn new(max_iter: usize) -> Self {
        SgdConfig {
            base_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter,
        }
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &SgdConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::ScheduleOverrun {
            iter,
            max_iter: cfg.max_iter,
        });
    }
    if cfg.max_iter == 0 {
        return Ok(0.0);
    }
    let remaining = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.base_lr * remaining.powf(cfg.power))
}

/// Per-parameter velocities plus the iteration counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
    iter: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig, params: &[Tensor<T>]) -> Self {
        OptimizerState {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            iter: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn current_lr(&self) -> Result<f64> {
        poly_lr(self.iter, &self.config)
    }

    /// `v ← μ·v + g + λ·p`, `p ← p − lr(iter)·v`, then advances the counter.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if self.iter >= self.config.max_iter {
            return Err(Error::ScheduleOverrun {
                iter: self.iter + 1,
                max_iter: self.config.max_iter,
            });
        }
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = T::from_f64(self.current_lr()?);
        let mu = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv = *pv - lr * *vv;
            }
        }
        self.iter += 1;
        Ok(())
    }
}
