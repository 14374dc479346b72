use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Centre and population standard deviation of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Per-feature normalization for (bank_mm, z_mm) inputs and the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub inputs: Vec<ZScore>,
    pub target: ZScore,
}

impl NormalizationState {
    pub fn apply_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.inputs).map(|(v, z)| z.apply(*v)).collect()
    }
}

pub fn zscore_fit(values: &[f64]) -> Result<ZScore> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Normalization("non-finite value".into()));
    }
    let first = values.first().copied();
    if values.len() < 2 || values.iter().all(|v| Some(*v) == first) {
        return Err(Error::Normalization(
            "z-score needs at least two distinct values".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Normalization("zero variance".into()));
    }
    Ok(ZScore { mean, std })
}

pub fn zscore_apply(values: &[f64], state: &ZScore) -> Vec<f64> {
    values.iter().map(|v| state.apply(*v)).collect()
}

pub fn zscore_invert(values: &[f64], state: &ZScore) -> Vec<f64> {
    values.iter().map(|v| state.invert(*v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn small_example() {
        let s = zscore_fit(&[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert!((s.std - 1.632993).abs() < 1e-6);
        assert_eq!(s.apply(4.0), 0.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(zscore_fit(&[1.0]), Err(Error::Normalization(_))));
        assert!(matches!(zscore_fit(&[3.0, 3.0, 3.0]), Err(Error::Normalization(_))));
        assert!(matches!(zscore_fit(&[]), Err(Error::Normalization(_))));
    }

    #[test]
    fn fresh_gaussian_sample_maps_to_standard_normal() {
        // Fit on one N(5, 3^2) sample, apply to an independent one.
        let mut rng = crate::rng::seeded(1);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| 5.0 + 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let s = zscore_fit(&draw(100_000)).unwrap();
        let z = zscore_apply(&draw(100_000), &s);
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() <= 0.02, "{m}");
        assert!((0.98..=1.02).contains(&sd), "{sd}");
    }

    #[test]
    fn fitted_data_is_standardized() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 40.0 + 7.0).collect();
        let s = zscore_fit(&xs).unwrap();
        let z = zscore_apply(&xs, &s);
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
