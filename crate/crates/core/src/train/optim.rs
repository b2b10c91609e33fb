//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<Scalar>,
    v: Vec<Scalar>,
}

/// Optimizer state: first/second moments per parameter name and the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW {
    config: AdamWConfig,
    moments: IndexMap<String, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            moments: IndexMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to the parameters named in `grads`; every other
    /// parameter is left untouched. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let p = params.get(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::shape("adamw", p.shape(), grad.shape()));
            }
            if !grad.is_finite() {
                return Err(Error::Numeric {
                    op: "adamw",
                    msg: format!("non-finite gradient for {name}"),
                });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (beta1 as Scalar, beta2 as Scalar);
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            let n = grad.numel();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let decay = (lr * weight_decay) as Scalar;
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if decay != 0.0 {
                    *p -= decay * *p;
                }
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *p -= (lr * m_hat / (v_hat.sqrt() + eps)) as Scalar;
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &IndexMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as Scalar;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
