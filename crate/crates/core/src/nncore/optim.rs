use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    /// One bias-corrected update. `params` are visited in order and must
    /// together hold exactly `grads.len()` values.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[f64], learning_rate: f64) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if total != grads.len() || grads.len() != self.first.len() {
            return Err(Error::Shape {
                context: "optimizer gradient",
                expected: self.first.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                layer: 0,
                what: format!("non-finite gradient at parameter {i}"),
            });
        }
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut i = 0;
        for slice in params {
            for w in slice.iter_mut() {
                let g = grads[i];
                let m = beta1 * self.first[i] + (1.0 - beta1) * g;
                let v = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                self.first[i] = m;
                self.second[i] = v;
                *w -= learning_rate * (m / c1) / ((v / c2).sqrt() + epsilon);
                i += 1;
            }
        }
        Ok(())
    }
}
