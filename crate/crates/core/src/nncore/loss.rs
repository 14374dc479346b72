use serde::{Deserialize, Serialize};

use super::network::DenseLayer;
use super::spec::{HeadKind, NetworkSpec};
use crate::error::{Error, Result};

/// Lower bound added to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Training objective on the network's raw output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Mae,
    GaussianNll,
}

fn same_len(a: &[f64], b: &[f64], context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context,
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

fn batch_count(len: usize, output_dim: usize) -> Result<usize> {
    if output_dim == 0 || len == 0 || !len.is_multiple_of(output_dim) {
        return Err(Error::Parameter(format!(
            "batch of {len} values does not hold whole {output_dim}-dimensional outputs"
        )));
    }
    Ok(len / output_dim)
}

/// `(1/N) sum ||pred_i - target_i||^2` over `N` rows of `output_dim` values.
pub fn loss_mse(pred: &[f64], target: &[f64], output_dim: usize) -> Result<f64> {
    same_len(pred, target, "mse target")?;
    let n = batch_count(pred.len(), output_dim)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / n as f64)
}

/// `(1/N) sum |pred_i - target_i|_1` over `N` rows of `output_dim` values.
pub fn loss_mae(pred: &[f64], target: &[f64], output_dim: usize) -> Result<f64> {
    same_len(pred, target, "mae target")?;
    let n = batch_count(pred.len(), output_dim)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / n as f64)
}

/// Negative log-likelihood of `target` under `N(mean, sigma^2)`, summed.
pub fn gaussian_nll(target: &[f64], mean: &[f64], sigma: &[f64]) -> Result<f64> {
    same_len(mean, target, "nll target")?;
    same_len(mean, sigma, "nll sigma")?;
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Numeric {
            layer: 0,
            what: "non-positive sigma in likelihood".into(),
        });
    }
    Ok(mean
        .iter()
        .zip(sigma)
        .zip(target)
        .map(|((m, s), t)| nll_term(*m, *s, *t))
        .sum())
}

#[inline]
fn nll_term(mean: f64, sigma: f64, target: f64) -> f64 {
    let r = (target - mean) / sigma;
    HALF_LN_2PI + sigma.ln() + 0.5 * r * r
}

/// `lambda * sum(||W||^2 + ||b||^2)` over all layers.
pub fn l2_penalty(layers: &[DenseLayer], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let s: f64 = layers
        .iter()
        .map(|l| l.weights.iter().chain(&l.biases).map(|v| v * v).sum::<f64>())
        .sum();
    lambda * s
}

impl Loss {
    /// Batch-mean loss (summed over output components) and its gradient
    /// w.r.t. `raw`.
    pub fn evaluate(self, raw: &[f64], target: &[f64], batch: usize, spec: &NetworkSpec) -> Result<(f64, Vec<f64>)> {
        let m = spec.output_dim;
        if target.len() != batch * m {
            return Err(Error::Shape {
                context: "loss target",
                expected: batch * m,
                got: target.len(),
            });
        }
        if raw.len() != batch * spec.raw_output_dim() {
            return Err(Error::Shape {
                context: "loss prediction",
                expected: batch * spec.raw_output_dim(),
                got: raw.len(),
            });
        }
        if batch == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        let n = batch as f64;
        match (self, spec.head) {
            (Loss::Mse, HeadKind::Point) => {
                let mut total = 0.0;
                let grad = raw
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let d = p - t;
                        total += d * d;
                        2.0 * d / n
                    })
                    .collect();
                Ok((total / n, grad))
            }
            (Loss::Mae, HeadKind::Point) => {
                let mut total = 0.0;
                let grad = raw
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let d = p - t;
                        total += d.abs();
                        if d > 0.0 {
                            1.0 / n
                        } else if d < 0.0 {
                            -1.0 / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok((total / n, grad))
            }
            (Loss::GaussianNll, HeadKind::Gaussian) => {
                let mut total = 0.0;
                let mut grad = vec![0.0; raw.len()];
                for ((row, g), t) in raw
                    .chunks_exact(2 * m)
                    .zip(grad.chunks_exact_mut(2 * m))
                    .zip(target.chunks_exact(m))
                {
                    for j in 0..m {
                        let mu = row[j];
                        let r = row[m + j];
                        let sigma = softplus(r) + SIGMA_FLOOR;
                        let d = t[j] - mu;
                        total += nll_term(mu, sigma, t[j]);
                        let s2 = sigma * sigma;
                        g[j] = -d / s2 / n;
                        g[m + j] = (1.0 / sigma - d * d / (s2 * sigma)) * sigmoid(r) / n;
                    }
                }
                Ok((total / n, grad))
            }
            (loss, head) => Err(Error::Config(format!(
                "loss {loss:?} does not apply to a {head:?} head"
            ))),
        }
    }
}
