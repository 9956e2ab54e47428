use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: `θ ← θ − lr·wd·θ` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Matrix]) -> Self {
        let zeros = |p: &Matrix| Matrix::zeros(p.rows(), p.cols());
        Self {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} tensors", self.first.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.first[i]) {
                return Err(Error::shape(
                    "adam_step",
                    self.first[i].shape_str(),
                    format!("{} / {}", p.shape_str(), g.shape_str()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (p, g, m, v) = (
                p.as_mut_slice(),
                g.as_slice(),
                m.as_mut_slice(),
                v.as_mut_slice(),
            );
            for i in 0..p.len() {
                if weight_decay != 0.0 {
                    p[i] -= lr * weight_decay * p[i];
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
