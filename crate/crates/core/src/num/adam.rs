//! Adam with bias correction.

use super::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("gradient vector has {got} entries for a store of {want} parameters")]
    GradCountMismatch { got: usize, want: usize },
    #[error("gradient for parameter {name:?} has shape {got:?}, expected {want:?}")]
    GradShapeMismatch { name: String, got: (usize, usize), want: (usize, usize) },
}

/// Optimizer state: first/second moment per parameter, in store order.
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update. `grads[i]` pairs with parameter `i`; `None` is an exact
    /// zero gradient. Parameters that are not trainable, or whose name starts
    /// with a frozen prefix, are left untouched (their moments do not advance
    /// either, so freezing is fully inert).
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<Tensor<S>>],
        frozen_prefixes: &[&str],
    ) -> Result<(), AdamError> {
        if grads.len() != store.len() {
            return Err(AdamError::GradCountMismatch { got: grads.len(), want: store.len() });
        }
        self.t += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        // Fold both bias corrections into the step size.
        let lr_t = S::from_f64(self.cfg.lr * bc2.sqrt() / bc1);

        for (pid, p) in store.iter_mut() {
            if !p.trainable || frozen_prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            let Some(g) = &grads[pid.0] else { continue };
            if g.shape() != p.value.shape() {
                return Err(AdamError::GradShapeMismatch {
                    name: p.name.clone(),
                    got: g.shape(),
                    want: p.value.shape(),
                });
            }
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            for (((w, &gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                *w = *w - lr_t * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}
