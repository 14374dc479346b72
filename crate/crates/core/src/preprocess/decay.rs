use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::synthdata::{Campaign, MeasurementCycle};

/// Cycles whose largest count does not exceed this are discarded.
pub const DEFAULT_COUNT_THRESHOLD: f64 = 100.0;

/// Scale counts back to the reference time:
/// `counts * exp(ln 2 * (t_scan - t_ref) / half_life)`, point by point.
pub fn decay_correct(counts: &[f64], t_scan: &[f64], t_ref: f64, half_life: f64) -> Result<Vec<f64>> {
    if !(half_life > 0.0 && half_life.is_finite()) {
        return Err(Error::Parameter(format!("half-life must be positive, got {half_life}")));
    }
    if counts.len() != t_scan.len() {
        return Err(Error::Shape {
            context: "decay_correct timestamps",
            expected: counts.len(),
            got: t_scan.len(),
        });
    }
    if !t_ref.is_finite() {
        return Err(Error::Data("non-finite reference time".into()));
    }
    counts
        .iter()
        .zip(t_scan)
        .map(|(&c, &t)| {
            if !c.is_finite() || !t.is_finite() {
                return Err(Error::Data(format!("non-finite count {c} or time {t}")));
            }
            Ok(c * (LN_2 * (t - t_ref) / half_life).exp())
        })
        .collect()
}

pub fn decay_correct_cycle(cycle: &MeasurementCycle, t_ref: f64, half_life: f64) -> Result<MeasurementCycle> {
    let mut out = cycle.clone();
    for p in &mut out.profiles {
        let present: Vec<(usize, f64)> = p
            .counts
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .collect();
        let counts: Vec<f64> = present.iter().map(|(_, c)| *c).collect();
        let times: Vec<f64> = present.iter().map(|(i, _)| p.timestamps[*i]).collect();
        let corrected = decay_correct(&counts, &times, t_ref, half_life)?;
        for ((i, _), v) in present.iter().zip(corrected) {
            p.counts[*i] = Some(v);
        }
    }
    Ok(out)
}

/// Correct every cycle of a campaign to the start of its scan schedule.
pub fn decay_correct_campaign(campaign: &Campaign) -> Result<Vec<MeasurementCycle>> {
    campaign
        .cycles
        .iter()
        .map(|c| decay_correct_cycle(c, campaign.schedule.start_h, campaign.half_life_h))
        .collect()
}

/// Split cycles into (kept, rejected); a cycle is rejected iff its largest
/// count over all assemblies and points is `<= threshold`.
pub fn reject_low_count_cycles(
    cycles: Vec<MeasurementCycle>,
    threshold: f64,
) -> Result<(Vec<MeasurementCycle>, Vec<MeasurementCycle>)> {
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!("threshold must be positive, got {threshold}")));
    }
    Ok(cycles.into_iter().partition(|c| c.max_count() > threshold))
}
