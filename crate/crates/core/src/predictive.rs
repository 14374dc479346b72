//! Moment composition of Monte Carlo predictive samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::preprocess::ZScore;
use crate::rng::{substream, Rng};

/// Passes per reproducible work item of a Monte Carlo prediction.
pub const PASSES_PER_CHUNK: usize = 250;

/// Per-query predictive moments and a Gaussian interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub epistemic_std: Vec<f64>,
    pub aleatoric_std: Vec<f64>,
    pub total_std: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub level: f64,
    pub passes: usize,
}

/// Two-sided standard-normal quantile for a central interval.
pub fn z_score(level: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Parameter(format!("interval level {level} outside [0, 1)")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + 0.5 * level))
}

/// Running per-query moments: Welford for the mean head, plain sum for
/// the predicted variance.
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sigma2_sum: Vec<f64>,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Moments {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            sigma2_sum: vec![0.0; n],
        }
    }

    pub fn push(&mut self, mu: &[f64], sigma: Option<&[f64]>) {
        self.count += 1;
        let k = self.count as f64;
        for (i, &x) in mu.iter().enumerate() {
            let d = x - self.mean[i];
            self.mean[i] += d / k;
            self.m2[i] += d * (x - self.mean[i]);
        }
        if let Some(s) = sigma {
            for (acc, s) in self.sigma2_sum.iter_mut().zip(s) {
                *acc += s * s;
            }
        }
    }

    /// Chan et al. pairwise merge.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
            self.sigma2_sum[i] += other.sigma2_sum[i];
        }
        self.count += other.count;
    }

    pub fn finish(self, level: f64) -> Result<PredictiveDistribution> {
        let t = self.count;
        if t < 2 {
            return Err(Error::Parameter(format!("need at least 2 passes, got {t}")));
        }
        let z = z_score(level)?;
        let epistemic_std: Vec<f64> = self.m2.iter().map(|m| (m.max(0.0) / (t - 1) as f64).sqrt()).collect();
        let aleatoric_std: Vec<f64> = self.sigma2_sum.iter().map(|s| (s / t as f64).sqrt()).collect();
        let total_std: Vec<f64> = epistemic_std
            .iter()
            .zip(&aleatoric_std)
            .map(|(e, a)| e.hypot(*a))
            .collect();
        let ci_low = self.mean.iter().zip(&total_std).map(|(m, s)| m - z * s).collect();
        let ci_high = self.mean.iter().zip(&total_std).map(|(m, s)| m + z * s).collect();
        Ok(PredictiveDistribution {
            mean: self.mean,
            epistemic_std,
            aleatoric_std,
            total_std,
            ci_low,
            ci_high,
            level,
            passes: t,
        })
    }
}

/// Run `passes` stochastic passes over `n` outputs and compose their moments.
///
/// Passes are grouped in chunks of [`PASSES_PER_CHUNK`]; chunk `c` draws from
/// sub-stream `c` of `seed` and chunk moments are merged in chunk order, so
/// the result does not depend on `exec`.
pub(crate) fn monte_carlo<F>(
    n: usize,
    passes: usize,
    level: f64,
    seed: u64,
    exec: Exec,
    pass: F,
) -> Result<PredictiveDistribution>
where
    F: Fn(&mut Rng) -> Result<(Vec<f64>, Option<Vec<f64>>)> + Sync + Send,
{
    if passes < 2 {
        return Err(Error::Parameter(format!("need at least 2 passes, got {passes}")));
    }
    z_score(level)?;
    let chunks = passes.div_ceil(PASSES_PER_CHUNK);
    let partial = exec.map_indexed(chunks, |c| -> Result<Moments> {
        let mut rng = substream(seed, c as u64);
        let mut acc = Moments::new(n);
        let todo = PASSES_PER_CHUNK.min(passes - c * PASSES_PER_CHUNK);
        for _ in 0..todo {
            let (mu, sigma) = pass(&mut rng)?;
            acc.push(&mu, sigma.as_deref());
        }
        Ok(acc)
    });
    let mut total = Moments::new(n);
    for p in partial {
        total.merge(&p?);
    }
    total.finish(level)
}

impl PredictiveDistribution {
    /// Compose explicit per-pass samples `mu[t][i]`, `sigma[t][i]`.
    pub fn from_samples(mu: &[Vec<f64>], sigma: &[Vec<f64>], level: f64) -> Result<Self> {
        let n = mu.first().map_or(0, Vec::len);
        if mu.len() != sigma.len() || mu.iter().chain(sigma).any(|v| v.len() != n) {
            return Err(Error::Shape {
                context: "predictive samples",
                expected: mu.len() * n,
                got: sigma.iter().map(Vec::len).sum(),
            });
        }
        let mut acc = Moments::new(n);
        for (m, s) in mu.iter().zip(sigma) {
            acc.push(m, Some(s));
        }
        acc.finish(level)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Recompute the interval at another level from the stored moments.
    pub fn with_level(&self, level: f64) -> Result<Self> {
        let z = z_score(level)?;
        let mut out = self.clone();
        out.level = level;
        out.ci_low = self.mean.iter().zip(&self.total_std).map(|(m, s)| m - z * s).collect();
        out.ci_high = self.mean.iter().zip(&self.total_std).map(|(m, s)| m + z * s).collect();
        Ok(out)
    }

    /// Map from normalized target units back to physical units.
    pub fn denormalize(&self, target: &ZScore) -> Self {
        let loc = |v: &Vec<f64>| v.iter().map(|x| target.invert(*x)).collect::<Vec<f64>>();
        let scale = |v: &Vec<f64>| v.iter().map(|x| x * target.std).collect::<Vec<f64>>();
        PredictiveDistribution {
            mean: loc(&self.mean),
            epistemic_std: scale(&self.epistemic_std),
            aleatoric_std: scale(&self.aleatoric_std),
            total_std: scale(&self.total_std),
            ci_low: loc(&self.ci_low),
            ci_high: loc(&self.ci_high),
            level: self.level,
            passes: self.passes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn two_pass_example() {
        let p = PredictiveDistribution::from_samples(&[vec![1.0], vec![3.0]], &[vec![0.0], vec![0.0]], 0.95).unwrap();
        assert_eq!(p.mean, vec![2.0]);
        assert!((p.epistemic_std[0].powi(2) - 2.0).abs() < 1e-12);
        assert!((p.total_std[0] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(p.aleatoric_std, vec![0.0]);
    }

    #[test]
    fn variances_add() {
        let p = PredictiveDistribution::from_samples(
            &[vec![1.0], vec![3.0], vec![2.0]],
            &[vec![1.0], vec![2.0], vec![3.0]],
            0.9,
        )
        .unwrap();
        let e = p.epistemic_std[0];
        let a = p.aleatoric_std[0];
        assert!((a * a - 14.0 / 3.0).abs() < 1e-12);
        assert!((p.total_std[0].powi(2) - (e * e + a * a)).abs() < 1e-12);
        let z = z_score(0.9).unwrap();
        assert!((p.ci_high[0] - p.mean[0] - z * p.total_std[0]).abs() < 1e-12);
    }

    #[test]
    fn single_pass_rejected() {
        assert!(matches!(
            PredictiveDistribution::from_samples(&[vec![1.0]], &[vec![0.0]], 0.95),
            Err(Error::Parameter(_))
        ));
        assert!(z_score(1.0).is_err());
        assert!((z_score(0.95).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn interval_widens_with_level() {
        let p = PredictiveDistribution::from_samples(&[vec![0.0], vec![1.0]], &[vec![0.5], vec![0.5]], 0.95).unwrap();
        let w = |l: f64| {
            let q = p.with_level(l).unwrap();
            q.ci_high[0] - q.ci_low[0]
        };
        assert!(w(0.99) > w(0.95) && w(0.95) > w(0.68));
    }

    #[test]
    fn chunked_merge_matches_direct() {
        let pass = |rng: &mut Rng| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
            let a: f64 = rng.random();
            Ok((vec![a, 2.0 * a + 1.0], Some(vec![a, 0.1])))
        };
        let seq = monte_carlo(2, 777, 0.95, 5, Exec::Sequential, pass).unwrap();
        let par = monte_carlo(2, 777, 0.95, 5, Exec::Parallel, pass).unwrap();
        assert_eq!(seq, par);
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for c in 0..777usize.div_ceil(PASSES_PER_CHUNK) {
            let mut rng = substream(5, c as u64);
            for _ in 0..PASSES_PER_CHUNK.min(777 - c * PASSES_PER_CHUNK) {
                let (m, s) = pass(&mut rng).unwrap();
                mu.push(m);
                sigma.push(s.unwrap());
            }
        }
        let direct = PredictiveDistribution::from_samples(&mu, &sigma, 0.95).unwrap();
        for i in 0..2 {
            assert!((seq.mean[i] - direct.mean[i]).abs() < 1e-12);
            assert!((seq.total_std[i] - direct.total_std[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn denormalize_maps_units() {
        let p = PredictiveDistribution::from_samples(&[vec![0.0], vec![2.0]], &[vec![1.0], vec![1.0]], 0.95).unwrap();
        let z = ZScore { mean: 100.0, std: 10.0 };
        let q = p.denormalize(&z);
        assert!((q.mean[0] - 110.0).abs() < 1e-12);
        assert!((q.total_std[0] - 10.0 * p.total_std[0]).abs() < 1e-12);
        assert!((q.ci_low[0] - (100.0 + 10.0 * p.ci_low[0])).abs() < 1e-9);
    }
}
