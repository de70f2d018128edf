//! AdamW: Adam moment estimation with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;

/// Optimizer state: step count plus first/second moment buffers, one pair
/// per parameter tensor, allocated lazily on the first step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Learning rate.
    pub lr: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator stabilizer.
    pub eps: f64,
    /// Decoupled weight-decay coefficient.
    pub weight_decay: f64,
}

impl AdamW {
    /// Standard defaults with the given learning rate:
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`, `weight_decay = 0.01`.
    pub fn new(lr: f64) -> Self {
        AdamW {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Override the decay coefficient.
    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update:
    ///
    /// ```text
    /// m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
    /// m_hat = m/(1-b1^t)          v_hat = v/(1-b2^t)
    /// theta <- theta - lr*(m_hat/(sqrt(v_hat)+eps) + weight_decay*theta)
    /// ```
    ///
    /// `grads` must align with the slot order of `params`. A non-finite
    /// gradient aborts before touching any parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{} parameters but {} gradient buffers",
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, ((name, tensor), grad)) in params.iter().zip(grads).enumerate() {
            if grad.len() != tensor.numel() {
                return Err(Error::shape(
                    "adamw_step",
                    format!(
                        "parameter {name:?} has {} entries but gradient has {} (slot {i})",
                        tensor.numel(),
                        grad.len()
                    ),
                ));
            }
            if let Some(bad) = grad.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {name:?} (value {bad})"),
                });
            }
        }

        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        #[allow(clippy::needless_range_loop)] // slot indexes four parallel buffers
        for slot in 0..params.len() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let g = &grads[slot];
            let slot_ref = crate::numerics::params::ParamSlot(slot);
            let mut tensor = params.tensor(slot_ref).clone();
            for (j, theta) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *theta);
            }
            params.set_tensor(slot_ref, tensor)?;
        }
        Ok(())
    }
}
