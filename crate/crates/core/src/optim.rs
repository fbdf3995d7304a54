//! AdamW with decoupled weight decay.
//!
//! ```text
//! m  <- b1 m + (1 - b1) g
//! v  <- b2 v + (1 - b2) g^2
//! m^ =  m / (1 - b1^t),  v^ = v / (1 - b2^t)
//! w  <- w (1 - lr wd) - lr m^ / (sqrt(v^) + eps)     weights
//! b  <- b             - lr m^ / (sqrt(v^) + eps)     biases (no decay)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state; moments are laid out in the visiting order of the nets passed to `step`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Bias-corrected moments `(m^, v^)` at the current step.
    pub fn corrected_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let c1 = 1.0 - self.config.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.config.beta2.powi(self.t as i32);
        (
            self.m.iter().map(|m| m / c1).collect(),
            self.v.iter().map(|v| v / c2).collect(),
        )
    }

    pub fn step(&mut self, mut params: Vec<&mut Mlp>, grads: Vec<&Mlp>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dims("optimizer nets", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if !p.same_shape(g) {
                return Err(Error::InvalidConfig(format!("gradient shape differs for net {i}")));
            }
        }
        let total: usize = params.iter().map(|p| p.num_params()).sum();
        if self.m.is_empty() {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        } else if self.m.len() != total {
            return Err(Error::dims("optimizer state", self.m.len(), total));
        }
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(&grads) {
            let mut gv = g.params();
            let (m, v) = (&mut self.m, &mut self.v);
            p.for_each_param_mut(|theta, is_weight| {
                let grad = gv.next().unwrap_or(0.0);
                m[k] = beta1 * m[k] + (1.0 - beta1) * grad;
                v[k] = beta2 * v[k] + (1.0 - beta2) * grad * grad;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                if is_weight {
                    *theta *= decay;
                }
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                k += 1;
            });
        }
        Ok(())
    }
}
