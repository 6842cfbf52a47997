use crate::error::{Error, Result};

use super::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter layout.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        Adam {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of `params` against `grads` (gradients of a loss to minimise).
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::usage("adam_step: gradient/parameter shapes differ"));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads.tensor(i).data();
            let m = self.m.tensor_mut(i).data_mut();
            for (mk, gk) in m.iter_mut().zip(g) {
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
            }
            let v = self.v.tensor_mut(i).data_mut();
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
            }
            let m = self.m.tensor(i).data();
            let v = self.v.tensor(i).data();
            let p = params.tensor_mut(i).data_mut();
            for k in 0..p.len() {
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
