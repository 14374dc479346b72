use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::savgol::{savgol_filter_gaps, SmoothSettings};
use super::zscore::{zscore_fit, NormalizationState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::seeded;
use crate::synthdata::MeasurementCycle;

/// Train / test / validation fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.64, 0.20, 0.16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub cycle_id: String,
    pub assembly: String,
    pub bank_mm: f64,
    pub z_mm: f64,
    /// Decay-corrected count.
    pub y_raw: f64,
    /// Training target: `y_raw`, smoothed when smoothing is enabled.
    pub y_processed: f64,
}

impl Sample {
    pub fn x(&self) -> [f64; 2] {
        [self.bank_mm, self.z_mm]
    }
}

/// Supervised samples of one assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub assembly: String,
    pub samples: Vec<Sample>,
    pub normalization: Option<NormalizationState>,
    pub smooth: Option<SmoothSettings>,
    /// Cycles in which this assembly had no profile.
    pub missing_cycles: Vec<String>,
}

impl RegressionDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fit input and target z-scores on the samples at `indices`.
    pub fn fit_normalization(&mut self, indices: &[usize]) -> Result<&NormalizationState> {
        let pick = |f: &dyn Fn(&Sample) -> f64| -> Vec<f64> { indices.iter().map(|&i| f(&self.samples[i])).collect() };
        let state = NormalizationState {
            inputs: vec![zscore_fit(&pick(&|s| s.bank_mm))?, zscore_fit(&pick(&|s| s.z_mm))?],
            target: zscore_fit(&pick(&|s| s.y_processed))?,
        };
        Ok(self.normalization.insert(state))
    }

    pub fn fit_normalization_all(&mut self) -> Result<&NormalizationState> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.fit_normalization(&all)
    }

    /// Row-major `(n, 2)` inputs and `(n, 1)` targets, normalized if a
    /// state is attached.
    pub fn design(&self, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(indices.len() * 2);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            match &self.normalization {
                Some(n) => {
                    x.push(n.inputs[0].apply(s.bank_mm));
                    x.push(n.inputs[1].apply(s.z_mm));
                    y.push(n.target.apply(s.y_processed));
                }
                None => {
                    x.extend_from_slice(&s.x());
                    y.push(s.y_processed);
                }
            }
        }
        (x, y)
    }

    pub fn cycle_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.cycle_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Samples belonging to the given cycles, in original order.
    pub fn select_cycles(&self, cycles: &[String]) -> RegressionDataset {
        RegressionDataset {
            samples: self
                .samples
                .iter()
                .filter(|s| cycles.contains(&s.cycle_id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// One dataset per assembly from decay-corrected cycles.
///
/// Missing axial points are excluded; an assembly absent from a cycle is
/// recorded in `missing_cycles`.
pub fn build_dataset(
    cycles: &[MeasurementCycle],
    z_mm: &[f64],
    smooth: Option<SmoothSettings>,
    normalize: bool,
) -> Result<Vec<RegressionDataset>> {
    let assemblies: BTreeSet<&str> = cycles
        .iter()
        .flat_map(|c| c.profiles.iter().map(|p| p.assembly.as_str()))
        .collect();
    let assemblies: Vec<&str> = assemblies.into_iter().collect();
    let built = Exec::default().map_slice(&assemblies, |&assembly| {
        build_one(cycles, z_mm, assembly, smooth, normalize)
    });
    built.into_iter().collect()
}

fn build_one(
    cycles: &[MeasurementCycle],
    z_mm: &[f64],
    assembly: &str,
    smooth: Option<SmoothSettings>,
    normalize: bool,
) -> Result<RegressionDataset> {
    let mut samples = Vec::new();
    let mut missing_cycles = Vec::new();
    for cycle in cycles {
        let Some(profile) = cycle.profile(assembly) else {
            missing_cycles.push(cycle.id.clone());
            continue;
        };
        if profile.counts.len() != z_mm.len() {
            return Err(Error::Shape {
                context: "profile length vs axial grid",
                expected: z_mm.len(),
                got: profile.counts.len(),
            });
        }
        let processed = match smooth {
            Some(s) => savgol_filter_gaps(&profile.counts, s)?,
            None => profile.counts.clone(),
        };
        for ((raw, proc), z) in profile.counts.iter().zip(&processed).zip(z_mm) {
            if let (Some(raw), Some(proc)) = (raw, proc) {
                if !raw.is_finite() || !proc.is_finite() {
                    return Err(Error::Data(format!("non-finite count in {}/{assembly}", cycle.id)));
                }
                samples.push(Sample {
                    cycle_id: cycle.id.clone(),
                    assembly: assembly.to_string(),
                    bank_mm: cycle.bank_mm,
                    z_mm: *z,
                    y_raw: *raw,
                    y_processed: *proc,
                });
            }
        }
    }
    let mut ds = RegressionDataset {
        assembly: assembly.to_string(),
        samples,
        normalization: None,
        smooth,
        missing_cycles,
    };
    if normalize {
        ds.fit_normalization_all()?;
    }
    Ok(ds)
}

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Random disjoint (train, test, validation) partition of `0..n`.
///
/// Test and validation sizes are `floor(n * f)`; the remainder goes to
/// training.
pub fn partition(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Parameter("split fractions must be positive".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("split fractions sum to {sum}, not 1")));
    }
    let n_test = (n as f64 * fractions[1]).floor() as usize;
    let n_val = (n as f64 * fractions[2]).floor() as usize;
    let n_train = n - n_test - n_val;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let validation = order.split_off(n_train + n_test);
    let test = order.split_off(n_train);
    Ok(Split {
        train: order,
        test,
        validation,
    })
}

/// Settings and normalization written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub assembly: String,
    pub n_samples: usize,
    pub cycles: Vec<String>,
    pub missing_cycles: Vec<String>,
    pub smooth: Option<SmoothSettings>,
    pub count_threshold: f64,
    pub half_life_h: f64,
    pub normalization: Option<NormalizationState>,
}

pub fn write_dataset_csv(path: &Path, ds: &RegressionDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in &ds.samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset CSV. All rows must share one assembly.
pub fn read_dataset_csv(path: &Path) -> Result<RegressionDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let samples: Vec<Sample> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let assembly = samples
        .first()
        .map(|s| s.assembly.clone())
        .ok_or_else(|| Error::Data(format!("{} has no samples", path.display())))?;
    if samples.iter().any(|s| s.assembly != assembly) {
        return Err(Error::Data(format!("{} mixes assemblies", path.display())));
    }
    Ok(RegressionDataset {
        assembly,
        samples,
        normalization: None,
        smooth: None,
        missing_cycles: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::AxialProfile;

    fn cycles(n: usize, assemblies: &[&str]) -> Vec<MeasurementCycle> {
        (0..n)
            .map(|c| MeasurementCycle {
                id: format!("C{c:03}"),
                bank_mm: 450.0 + c as f64,
                exposure: 1.0,
                profiles: assemblies
                    .iter()
                    .map(|a| AxialProfile {
                        assembly: a.to_string(),
                        timestamps: vec![0.0; 180],
                        counts: (0..180).map(|i| Some(100.0 + ((i * 7 + c * 3) % 11) as f64)).collect(),
                    })
                    .collect(),
                defect_labels: vec![],
            })
            .collect()
    }

    fn grid() -> Vec<f64> {
        (0..180).map(|i| (i as f64 + 0.5) * 600.0 / 180.0).collect()
    }

    #[test]
    fn seventy_seven_cycles_give_13860_samples() {
        let ds = build_dataset(&cycles(77, &["E6"]), &grid(), None, false).unwrap();
        assert_eq!(ds[0].len(), 13860);
    }

    #[test]
    fn normalized_target_is_standardized() {
        let mut ds = build_dataset(&cycles(5, &["E6"]), &grid(), None, true).unwrap();
        let d = ds.remove(0);
        let all: Vec<usize> = (0..d.len()).collect();
        let (_, y) = d.design(&all);
        let n = y.len() as f64;
        let m = y.iter().sum::<f64>() / n;
        let v = y.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn per_assembly_independence() {
        let mut cs = cycles(4, &["E6", "H3"]);
        let forward = build_dataset(&cs, &grid(), Some(SmoothSettings::default()), true).unwrap();
        for c in &mut cs {
            c.profiles.reverse();
        }
        let backward = build_dataset(&cs, &grid(), Some(SmoothSettings::default()), true).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn missing_assembly_is_recorded() {
        let mut cs = cycles(3, &["E6", "H3"]);
        cs[1].profiles.retain(|p| p.assembly == "E6");
        cs[2].profiles[0].counts[5] = None;
        let ds = build_dataset(&cs, &grid(), None, false).unwrap();
        let h3 = ds.iter().find(|d| d.assembly == "H3").unwrap();
        assert_eq!(h3.missing_cycles, vec!["C001".to_string()]);
        assert_eq!(h3.len(), 360);
        let e6 = ds.iter().find(|d| d.assembly == "E6").unwrap();
        assert_eq!(e6.len(), 539);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let s = partition(13860, DEFAULT_FRACTIONS, 3).unwrap();
        // floor(2772.0) test, floor(2217.6) validation, remainder to training.
        assert_eq!((s.train.len(), s.test.len(), s.validation.len()), (8871, 2772, 2217));
    }

    #[test]
    fn split_is_a_partition_and_reproducible() {
        let s = partition(1000, DEFAULT_FRACTIONS, 9).unwrap();
        assert_eq!(s, partition(1000, DEFAULT_FRACTIONS, 9).unwrap());
        assert_ne!(s, partition(1000, DEFAULT_FRACTIONS, 10).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).chain(&s.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(matches!(partition(10, [0.5, 0.3, 0.3], 0), Err(Error::Parameter(_))));
        assert!(matches!(partition(10, [0.8, 0.2, 0.0], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn csv_round_trip() {
        let ds = build_dataset(&cycles(2, &["E6"]), &grid(), Some(SmoothSettings::default()), false)
            .unwrap()
            .remove(0);
        let dir = std::env::temp_dir().join(format!("fluxnet-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("E6.csv");
        write_dataset_csv(&path, &ds).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back.samples, ds.samples);
        std::fs::remove_dir_all(&dir).ok();
    }
}
