//! Accuracy, interval coverage, error distributions and bank sensitivity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictive::{z_score, PredictiveDistribution};
use crate::preprocess::{savgol_filter_gaps, SmoothSettings};
use crate::synthdata::{normalized_profile, profile_distance, MeasurementCycle};

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("no points to score".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// RMSE divided by the mean of the target.
pub fn nrmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    let r = rmse(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    if mean == 0.0 {
        return Err(Error::Metric("target mean is zero".into()));
    }
    Ok(r / mean)
}

/// Coefficient of determination.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Metric("target has zero variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub level: f64,
    pub n_points: usize,
    pub n_covered: usize,
    pub coverage: f64,
}

fn count_within(mean: &[f64], std: &[f64], targets: &[f64], level: f64) -> Result<CoverageReport> {
    if mean.len() != targets.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} targets",
            mean.len(),
            targets.len()
        )));
    }
    let z = z_score(level)?;
    let n_covered = mean
        .iter()
        .zip(std)
        .zip(targets)
        .filter(|((m, s), t)| (*t - *m).abs() <= z * *s)
        .count();
    let n_points = targets.len();
    Ok(CoverageReport {
        level,
        n_points,
        n_covered,
        coverage: if n_points == 0 {
            0.0
        } else {
            n_covered as f64 / n_points as f64
        },
    })
}

/// Fraction of targets within the total-std interval at `level`.
pub fn ci_coverage(pred: &PredictiveDistribution, targets: &[f64], level: f64) -> Result<CoverageReport> {
    count_within(&pred.mean, &pred.total_std, targets, level)
}

/// Same count using only the epistemic std.
pub fn epistemic_coverage(pred: &PredictiveDistribution, targets: &[f64], level: f64) -> Result<CoverageReport> {
    count_within(&pred.mean, &pred.epistemic_std, targets, level)
}

/// Quantile by linear interpolation between order statistics at
/// position `(n - 1) q` of the sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleError {
    pub cycle_id: String,
    pub nrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyScore {
    pub assembly: String,
    /// Sorted by cycle id.
    pub cycles: Vec<CycleError>,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<String>,
}

/// Box-plot statistics per assembly with 1.5 IQR whiskers.
pub fn boxplot_summary(errors: &BTreeMap<String, Vec<CycleError>>) -> Result<Vec<AssemblyScore>> {
    errors
        .iter()
        .map(|(assembly, cycles)| {
            if cycles.is_empty() {
                return Err(Error::Report(format!("assembly {assembly} has no cycles")));
            }
            let mut cycles = cycles.clone();
            cycles.sort_by(|a, b| a.cycle_id.cmp(&b.cycle_id).then(a.nrmse.total_cmp(&b.nrmse)));
            let mut values: Vec<f64> = cycles.iter().map(|c| c.nrmse).collect();
            values.sort_by(f64::total_cmp);
            let (q1, median, q3) = (quantile(&values, 0.25), quantile(&values, 0.5), quantile(&values, 0.75));
            let iqr = q3 - q1;
            let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
            let inside = || values.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence);
            let whisker_low = inside().fold(f64::INFINITY, f64::min);
            let whisker_high = inside().fold(f64::NEG_INFINITY, f64::max);
            let outliers = cycles
                .iter()
                .filter(|c| c.nrmse < lo_fence || c.nrmse > hi_fence)
                .map(|c| c.cycle_id.clone())
                .collect();
            Ok(AssemblyScore {
                assembly: assembly.clone(),
                cycles,
                q1,
                median,
                q3,
                whisker_low,
                whisker_high,
                outliers,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub assembly: String,
    pub n_profiles: usize,
    /// Largest RMS distance between two mean-normalized profiles.
    pub raw_spread: f64,
    pub filtered_spread: f64,
    /// Median over profiles of mean(filtered) / rms(raw - filtered).
    pub median_snr: f64,
}

/// Variation of each assembly's profile shape across control-bank
/// positions, before and after smoothing. Only complete profiles are used;
/// counts are taken as given, so pass decay-corrected cycles.
pub fn sensitivity_report(cycles: &[MeasurementCycle], smooth: SmoothSettings) -> Result<Vec<SensitivityEntry>> {
    let banks: BTreeSet<u64> = cycles.iter().map(|c| c.bank_mm.to_bits()).collect();
    if banks.len() < 2 {
        return Err(Error::Report(format!(
            "sensitivity needs at least 2 bank positions, got {}",
            banks.len()
        )));
    }
    let mut raw: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    let mut filtered: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    let mut snr: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for cycle in cycles {
        for p in &cycle.profiles {
            if !p.is_complete() {
                continue;
            }
            let values: Vec<f64> = p.counts.iter().map(|c| c.expect("complete")).collect();
            let smooth_values: Vec<f64> = savgol_filter_gaps(&p.counts, smooth)?
                .into_iter()
                .map(|c| c.expect("complete"))
                .collect();
            let noise = profile_distance(&values, &smooth_values);
            let level = smooth_values.iter().sum::<f64>() / smooth_values.len() as f64;
            snr.entry(&p.assembly)
                .or_default()
                .push(if noise > 0.0 { level / noise } else { f64::INFINITY });
            raw.entry(&p.assembly).or_default().push(normalized_profile(&values));
            filtered
                .entry(&p.assembly)
                .or_default()
                .push(normalized_profile(&smooth_values));
        }
    }
    let spread = |profiles: &[Vec<f64>]| -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..profiles.len() {
            for j in i + 1..profiles.len() {
                best = best.max(profile_distance(&profiles[i], &profiles[j]));
            }
        }
        best
    };
    Ok(raw
        .iter()
        .map(|(assembly, r)| {
            let mut s = snr[assembly].clone();
            s.sort_by(f64::total_cmp);
            SensitivityEntry {
                assembly: assembly.to_string(),
                n_profiles: r.len(),
                raw_spread: spread(r),
                filtered_spread: spread(&filtered[assembly]),
                median_snr: quantile(&s, 0.5),
            }
        })
        .collect())
}
