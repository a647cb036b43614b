use serde::{Deserialize, Serialize};

use super::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments mirror the parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Params,
    pub second: Params,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        Self { config, step: 0, first: Params::zeros_like(params), second: Params::zeros_like(params) }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.first.tensors_mut().into_iter().zip(self.second.tensors_mut());
        for ((p, g), (m, v)) in tensors.zip(moments) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
