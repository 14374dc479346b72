use std::collections::HashSet;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::flux::TrueFluxModel;
use super::layout::CoreLayout;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, substream};

/// Cu-64 half-life in hours.
pub const CU64_HALF_LIFE_H: f64 = 12.7;
pub const CAMPAIGN_FORMAT: &str = "fluxnet-campaign";
const CAMPAIGN_VERSION: u32 = 1;

/// One wire scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialProfile {
    pub assembly: String,
    /// Scan time of every axial point, hours after the reference time.
    pub timestamps: Vec<f64>,
    /// Detector counts; `None` marks a point lost to a defect.
    pub counts: Vec<Option<f64>>,
}

impl AxialProfile {
    pub fn max_count(&self) -> Option<f64> {
        self.counts.iter().flatten().copied().reduce(f64::max)
    }

    pub fn is_complete(&self) -> bool {
        self.counts.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Wire displaced axially; magnitude in mm (signed, positive = upward).
    AxialShift,
    /// Top end of the scan lost; magnitude = number of points.
    MissingPoints,
    /// Exposure scaled by magnitude in (0, 1).
    UnderExposure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub magnitude: f64,
    pub cycle: String,
    /// `None` applies the defect to every assembly of the cycle.
    #[serde(default)]
    pub assembly: Option<String>,
}

impl DefectSpec {
    pub fn validate(&self, model: &TrueFluxModel) -> Result<()> {
        let m = self.magnitude;
        let ok = match self.kind {
            DefectKind::AxialShift => m.is_finite() && m.abs() <= 0.1 * model.active_height_mm,
            DefectKind::MissingPoints => m.fract() == 0.0 && m >= 1.0 && (m as usize) < model.n_axial,
            DefectKind::UnderExposure => m > 0.0 && m < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{:?} magnitude {m} out of bounds for cycle {}",
                self.kind, self.cycle
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectLabel {
    pub kind: DefectKind,
    pub magnitude: f64,
    pub assembly: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementCycle {
    pub id: String,
    pub bank_mm: f64,
    pub exposure: f64,
    pub profiles: Vec<AxialProfile>,
    #[serde(default)]
    pub defect_labels: Vec<DefectLabel>,
}

impl MeasurementCycle {
    pub fn profile(&self, assembly: &str) -> Option<&AxialProfile> {
        self.profiles.iter().find(|p| p.assembly == assembly)
    }

    /// Largest count over all assemblies and axial points.
    pub fn max_count(&self) -> f64 {
        self.profiles
            .iter()
            .filter_map(AxialProfile::max_count)
            .fold(0.0, f64::max)
    }
}

/// Wires are scanned one after another in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSchedule {
    /// Start of the first scan, hours after the reference time.
    pub start_h: f64,
    pub minutes_per_wire: f64,
}

impl Default for ScanSchedule {
    fn default() -> Self {
        ScanSchedule {
            start_h: 0.0,
            minutes_per_wire: 5.0,
        }
    }
}

impl ScanSchedule {
    fn timestamps(&self, wire_index: usize, n_points: usize) -> Vec<f64> {
        let wire_h = self.minutes_per_wire / 60.0;
        let start = self.start_h + wire_index as f64 * wire_h;
        (0..n_points)
            .map(|i| start + wire_h * i as f64 / n_points as f64)
            .collect()
    }
}

/// Generator internals kept for scoring: the Poisson means and the
/// pre-decay draws, per assembly in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleTruth {
    pub mean_counts: Vec<Vec<f64>>,
    pub pre_decay_counts: Vec<Vec<f64>>,
}

/// Expected (noise- and decay-free) counts for one cycle.
pub fn expected_cycle(
    model: &TrueFluxModel,
    layout: &CoreLayout,
    bank_mm: f64,
    exposure: f64,
) -> Result<MeasurementCycle> {
    check_exposure(exposure)?;
    let schedule = ScanSchedule::default();
    let profiles = layout
        .assemblies
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let counts = model
                .profile(a, bank_mm)?
                .into_iter()
                .map(|f| Some(exposure * a.radial_weight * f))
                .collect();
            Ok(AxialProfile {
                assembly: a.id.clone(),
                timestamps: schedule.timestamps(k, model.n_axial),
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementCycle {
        id: "expected".into(),
        bank_mm,
        exposure,
        profiles,
        defect_labels: Vec::new(),
    })
}

fn check_exposure(exposure: f64) -> Result<()> {
    if exposure > 0.0 && exposure.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("exposure must be positive, got {exposure}")))
    }
}

/// One noisy measurement cycle.
///
/// Counts are Poisson with mean `exposure * radial_weight * true_flux`, then
/// attenuated by the Cu-64 decay accumulated up to each point's scan time.
pub fn simulate_cycle(
    model: &TrueFluxModel,
    layout: &CoreLayout,
    bank_mm: f64,
    exposure: f64,
    seed: u64,
) -> Result<MeasurementCycle> {
    simulate_cycle_with_truth(model, layout, bank_mm, exposure, seed).map(|(c, _)| c)
}

pub fn simulate_cycle_with_truth(
    model: &TrueFluxModel,
    layout: &CoreLayout,
    bank_mm: f64,
    exposure: f64,
    seed: u64,
) -> Result<(MeasurementCycle, CycleTruth)> {
    let scales = vec![1.0; layout.assemblies.len()];
    simulate_scaled(model, layout, bank_mm, exposure, &scales, ScanSchedule::default(), seed)
}

fn simulate_scaled(
    model: &TrueFluxModel,
    layout: &CoreLayout,
    bank_mm: f64,
    exposure: f64,
    exposure_scale: &[f64],
    schedule: ScanSchedule,
    seed: u64,
) -> Result<(MeasurementCycle, CycleTruth)> {
    check_exposure(exposure)?;
    let decay_rate = std::f64::consts::LN_2 / CU64_HALF_LIFE_H;
    let mut profiles = Vec::with_capacity(layout.assemblies.len());
    let mut truth = CycleTruth {
        mean_counts: Vec::with_capacity(layout.assemblies.len()),
        pre_decay_counts: Vec::with_capacity(layout.assemblies.len()),
    };
    for (k, a) in layout.assemblies.iter().enumerate() {
        let mut rng = substream(seed, k as u64);
        let scale = exposure * exposure_scale[k] * a.radial_weight;
        let means: Vec<f64> = model.profile(a, bank_mm)?.into_iter().map(|f| scale * f).collect();
        let draws: Vec<f64> = means
            .iter()
            .map(|&m| {
                Poisson::new(m)
                    .map(|d| d.sample(&mut rng))
                    .map_err(|e| Error::Parameter(format!("Poisson mean {m}: {e}")))
            })
            .collect::<Result<_>>()?;
        let timestamps = schedule.timestamps(k, model.n_axial);
        let counts = draws
            .iter()
            .zip(&timestamps)
            .map(|(d, t)| Some(d * (-decay_rate * t).exp()))
            .collect();
        profiles.push(AxialProfile {
            assembly: a.id.clone(),
            timestamps,
            counts,
        });
        truth.mean_counts.push(means);
        truth.pre_decay_counts.push(draws);
    }
    let cycle = MeasurementCycle {
        id: "cycle".into(),
        bank_mm,
        exposure,
        profiles,
        defect_labels: Vec::new(),
    };
    Ok((cycle, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BankSampler {
    Uniform {
        low_mm: f64,
        high_mm: f64,
    },
    /// Cycles take these positions in turn.
    Fixed {
        positions_mm: Vec<f64>,
    },
}

impl Default for BankSampler {
    fn default() -> Self {
        BankSampler::Uniform {
            low_mm: 450.0,
            high_mm: 550.0,
        }
    }
}

impl BankSampler {
    fn draw(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            BankSampler::Uniform { low_mm, high_mm } => {
                if !(low_mm <= high_mm) {
                    return Err(Error::Config("bank sampler low > high".into()));
                }
                let mut rng = substream(seed, 0);
                Ok((0..n).map(|_| rng.random_range(*low_mm..=*high_mm)).collect())
            }
            BankSampler::Fixed { positions_mm } => {
                if positions_mm.is_empty() {
                    return Err(Error::Config("fixed bank sampler needs positions".into()));
                }
                Ok((0..n).map(|i| positions_mm[i % positions_mm.len()]).collect())
            }
        }
    }
}

pub fn cycle_id(index: usize) -> String {
    format!("C{:03}", index + 1)
}

/// A campaign of `n_cycles` measurement cycles with defects applied.
#[allow(clippy::too_many_arguments)]
pub fn simulate_campaign(
    model: &TrueFluxModel,
    layout: &CoreLayout,
    n_cycles: usize,
    exposure: f64,
    bank_sampler: &BankSampler,
    defects: &[DefectSpec],
    seed: u64,
    exec: Exec,
) -> Result<Vec<MeasurementCycle>> {
    if n_cycles == 0 {
        return Err(Error::Parameter("campaign needs at least one cycle".into()));
    }
    model.validate()?;
    layout.validate()?;
    let ids: Vec<String> = (0..n_cycles).map(cycle_id).collect();
    for d in defects {
        d.validate(model)?;
        if !ids.contains(&d.cycle) {
            return Err(Error::Config(format!("defect target cycle {} not found", d.cycle)));
        }
        if let Some(a) = &d.assembly {
            if layout.get(a).is_none() {
                return Err(Error::Config(format!("defect target assembly {a} not found")));
            }
        }
    }
    let banks = bank_sampler.draw(n_cycles, derive_seed(seed, "bank"))?;
    let noise_seed = derive_seed(seed, "noise");

    let cycles = exec.map_indexed(n_cycles, |i| {
        let id = &ids[i];
        let mine: Vec<&DefectSpec> = defects.iter().filter(|d| &d.cycle == id).collect();
        let scales: Vec<f64> = layout
            .assemblies
            .iter()
            .map(|a| {
                mine.iter()
                    .filter(|d| d.kind == DefectKind::UnderExposure && targets(d, &a.id))
                    .map(|d| d.magnitude)
                    .product()
            })
            .collect();
        let (mut cycle, _) = simulate_scaled(
            model,
            layout,
            banks[i],
            exposure,
            &scales,
            ScanSchedule::default(),
            derive_seed(noise_seed, id),
        )?;
        cycle.id = id.clone();
        for d in &mine {
            for p in cycle.profiles.iter_mut().filter(|p| targets(d, &p.assembly)) {
                match d.kind {
                    DefectKind::AxialShift => {
                        let k = (d.magnitude / model.axial_step_mm()).round() as isize;
                        shift_counts(&mut p.counts, k);
                    }
                    DefectKind::MissingPoints => {
                        let n = p.counts.len();
                        for c in &mut p.counts[n - d.magnitude as usize..] {
                            *c = None;
                        }
                    }
                    DefectKind::UnderExposure => {}
                }
            }
            cycle.defect_labels.push(DefectLabel {
                kind: d.kind,
                magnitude: d.magnitude,
                assembly: d.assembly.clone(),
            });
        }
        Ok(cycle)
    });
    cycles.into_iter().collect()
}

fn targets(d: &DefectSpec, assembly: &str) -> bool {
    d.assembly.as_deref().is_none_or(|a| a == assembly)
}

/// Translate by `k` grid points (positive = toward larger z), replicating
/// the edge value into the vacated cells.
pub(crate) fn shift_counts<T: Clone>(counts: &mut [T], k: isize) {
    let n = counts.len() as isize;
    if k == 0 || n == 0 {
        return;
    }
    let src = counts.to_vec();
    for (i, c) in counts.iter_mut().enumerate() {
        let j = (i as isize - k).clamp(0, n - 1);
        *c = src[j as usize].clone();
    }
}

/// Self-describing campaign file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub half_life_h: f64,
    pub schedule: ScanSchedule,
    pub layout: CoreLayout,
    pub model: TrueFluxModel,
    pub z_mm: Vec<f64>,
    pub cycles: Vec<MeasurementCycle>,
}

impl Campaign {
    pub fn new(layout: CoreLayout, model: TrueFluxModel, seed: u64, cycles: Vec<MeasurementCycle>) -> Self {
        Campaign {
            format: CAMPAIGN_FORMAT.into(),
            version: CAMPAIGN_VERSION,
            seed,
            half_life_h: CU64_HALF_LIFE_H,
            schedule: ScanSchedule::default(),
            z_mm: model.axial_grid(),
            layout,
            model,
            cycles,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Campaign = serde_json::from_str(text)?;
        if c.format != CAMPAIGN_FORMAT || c.version != CAMPAIGN_VERSION {
            return Err(Error::Data(format!(
                "unsupported campaign format {} v{}",
                c.format, c.version
            )));
        }
        let ids: HashSet<&str> = c.cycles.iter().map(|c| c.id.as_str()).collect();
        if ids.len() != c.cycles.len() {
            return Err(Error::Data("duplicate cycle ids".into()));
        }
        for cycle in &c.cycles {
            for p in &cycle.profiles {
                if p.counts.len() != c.z_mm.len() || p.timestamps.len() != c.z_mm.len() {
                    return Err(Error::Data(format!(
                        "profile {}/{} has {} points, grid has {}",
                        cycle.id,
                        p.assembly,
                        p.counts.len(),
                        c.z_mm.len()
                    )));
                }
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (CoreLayout, TrueFluxModel) {
        let layout = CoreLayout::reference();
        let model = TrueFluxModel::reference(&layout);
        (layout, model)
    }

    #[test]
    fn same_seed_same_cycle() {
        let (layout, model) = setup();
        let a = simulate_cycle(&model, &layout, 500.0, 600.0, 11).unwrap();
        let b = simulate_cycle(&model, &layout, 500.0, 600.0, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = simulate_cycle(&model, &layout, 500.0, 600.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn peak_relative_noise_matches_poisson() {
        // Central peak mean ~600 -> relative std 1/sqrt(600) ~ 4.1 %.
        let (layout, model) = setup();
        let idx = layout.assemblies.iter().position(|a| a.id == "E6").unwrap();
        let mut rel = Vec::new();
        for seed in 0..400 {
            let (_, truth) = simulate_cycle_with_truth(&model, &layout, 500.0, 600.0, seed).unwrap();
            let means = &truth.mean_counts[idx];
            let (j, m) = means.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            rel.push((truth.pre_decay_counts[idx][j] - m) / m);
        }
        let peak_mean = truth_peak(&model, &layout);
        assert!((peak_mean - 600.0).abs() < 60.0, "peak mean {peak_mean}");
        let sd = (rel.iter().map(|r| r * r).sum::<f64>() / rel.len() as f64).sqrt();
        let expected = 1.0 / peak_mean.sqrt();
        assert!((sd / expected - 1.0).abs() < 0.15, "sd {sd} expected {expected}");
    }

    fn truth_peak(model: &TrueFluxModel, layout: &CoreLayout) -> f64 {
        let c = expected_cycle(model, layout, 500.0, 600.0).unwrap();
        c.profile("E6").unwrap().max_count().unwrap()
    }

    #[test]
    fn large_exposure_converges_to_truth() {
        let (layout, model) = setup();
        let (cycle, truth) = simulate_cycle_with_truth(&model, &layout, 500.0, 1e12, 3).unwrap();
        let _ = cycle;
        for (draws, means) in truth.pre_decay_counts.iter().zip(&truth.mean_counts) {
            let a = crate::synthdata::normalized_profile(draws);
            let b = crate::synthdata::normalized_profile(means);
            let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-4, "{dev}");
        }
    }

    #[test]
    fn campaign_banks_in_range() {
        let (layout, model) = setup();
        let cycles = simulate_campaign(
            &model,
            &layout,
            86,
            600.0,
            &BankSampler::default(),
            &[],
            5,
            Exec::default(),
        )
        .unwrap();
        assert_eq!(cycles.len(), 86);
        assert!(cycles.iter().all(|c| (450.0..=550.0).contains(&c.bank_mm)));
    }

    #[test]
    fn campaign_parallel_matches_sequential() {
        let (layout, model) = setup();
        let run = |exec| simulate_campaign(&model, &layout, 6, 600.0, &BankSampler::default(), &[], 9, exec).unwrap();
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn axial_shift_translates_profile() {
        let (layout, model) = setup();
        let base = simulate_campaign(
            &model,
            &layout,
            3,
            600.0,
            &BankSampler::default(),
            &[],
            21,
            Exec::Sequential,
        )
        .unwrap();
        let defect = DefectSpec {
            kind: DefectKind::AxialShift,
            magnitude: 20.0,
            cycle: "C002".into(),
            assembly: Some("E6".into()),
        };
        let shifted = simulate_campaign(
            &model,
            &layout,
            3,
            600.0,
            &BankSampler::default(),
            &[defect],
            21,
            Exec::Sequential,
        )
        .unwrap();
        // 20 mm on a 600/180 mm grid rounds to 6 points.
        let k = 6;
        let orig = &base[1].profile("E6").unwrap().counts;
        let moved = &shifted[1].profile("E6").unwrap().counts;
        for (i, m) in moved.iter().enumerate() {
            let j = (i as isize - k).clamp(0, 179) as usize;
            assert_eq!(*m, orig[j]);
        }
        assert_eq!(base[0], shifted[0]);
        assert_eq!(base[1].profile("E5"), shifted[1].profile("E5"));
        assert_eq!(shifted[1].defect_labels.len(), 1);
    }

    #[test]
    fn under_exposed_cycle_falls_below_rejection_threshold() {
        let (layout, model) = setup();
        let defect = DefectSpec {
            kind: DefectKind::UnderExposure,
            magnitude: 0.1,
            cycle: "C001".into(),
            assembly: None,
        };
        let cycles = simulate_campaign(
            &model,
            &layout,
            2,
            600.0,
            &BankSampler::default(),
            &[defect],
            1,
            Exec::default(),
        )
        .unwrap();
        assert!(cycles[0].max_count() < 100.0, "{}", cycles[0].max_count());
        assert!(cycles[1].max_count() > 100.0);
    }

    #[test]
    fn missing_points_become_none() {
        let (layout, model) = setup();
        let defect = DefectSpec {
            kind: DefectKind::MissingPoints,
            magnitude: 12.0,
            cycle: "C001".into(),
            assembly: Some("H3".into()),
        };
        let cycles = simulate_campaign(
            &model,
            &layout,
            1,
            600.0,
            &BankSampler::default(),
            &[defect],
            1,
            Exec::default(),
        )
        .unwrap();
        let p = cycles[0].profile("H3").unwrap();
        assert_eq!(p.counts.iter().filter(|c| c.is_none()).count(), 12);
        assert!(p.counts[..168].iter().all(Option::is_some));
    }

    #[test]
    fn bad_defect_targets_are_config_errors() {
        let (layout, model) = setup();
        let run = |d: DefectSpec| {
            simulate_campaign(
                &model,
                &layout,
                2,
                600.0,
                &BankSampler::default(),
                &[d],
                1,
                Exec::default(),
            )
        };
        let base = DefectSpec {
            kind: DefectKind::AxialShift,
            magnitude: 10.0,
            cycle: "C009".into(),
            assembly: None,
        };
        assert!(matches!(run(base.clone()), Err(Error::Config(_))));
        let unknown = DefectSpec {
            cycle: "C001".into(),
            assembly: Some("Z9".into()),
            ..base.clone()
        };
        assert!(matches!(run(unknown), Err(Error::Config(_))));
        let too_far = DefectSpec {
            cycle: "C001".into(),
            magnitude: 61.0,
            ..base.clone()
        };
        assert!(matches!(run(too_far), Err(Error::Config(_))));
        let bad_scale = DefectSpec {
            kind: DefectKind::UnderExposure,
            magnitude: 1.5,
            cycle: "C001".into(),
            assembly: None,
        };
        assert!(matches!(run(bad_scale), Err(Error::Config(_))));
    }

    #[test]
    fn campaign_json_round_trip() {
        let (layout, model) = setup();
        let cycles = simulate_campaign(
            &model,
            &layout,
            2,
            600.0,
            &BankSampler::default(),
            &[],
            4,
            Exec::default(),
        )
        .unwrap();
        let campaign = Campaign::new(layout, model, 4, cycles);
        let text = campaign.to_json().unwrap();
        let back = Campaign::from_json(&text).unwrap();
        assert_eq!(back, campaign);
        assert_eq!(back.to_json().unwrap(), text);
    }
}
