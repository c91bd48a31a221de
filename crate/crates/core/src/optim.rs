//! Adam over any [`Params`] value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `grads` must have the same layout as `params`.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.first.len(), "gradient layout");
        self.steps += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        let mut offset = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut("", &mut |_, _, values| {
            for (k, p) in values.iter_mut().enumerate() {
                let i = offset + k;
                let gi = g[i] + c.weight_decay * *p;
                first[i] = c.beta1 * first[i] + (1.0 - c.beta1) * gi;
                second[i] = c.beta2 * second[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = first[i] / bias1;
                let v_hat = second[i] / bias2;
                *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
            offset += values.len();
        });
    }
}
