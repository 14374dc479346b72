use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::layout::{lattice_of, AssemblyDescriptor, AssemblyKind, CoreLayout, FOLLOWER_IDS};
use crate::error::{Error, Result};

/// Coupling-piece dip and top-end thermal peak of a follower assembly.
///
/// Both features travel with the control bank: centres are given as
/// offsets below the absorber tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowerFeatures {
    pub dip_offset_mm: f64,
    pub dip_width_mm: f64,
    /// Fractional depth of the dip, in [0, 1).
    pub dip_depth: f64,
    pub peak_offset_mm: f64,
    pub peak_width_mm: f64,
    pub peak_amplitude: f64,
}

impl Default for FollowerFeatures {
    fn default() -> Self {
        FollowerFeatures {
            dip_offset_mm: 90.0,
            dip_width_mm: 12.0,
            dip_depth: 0.3,
            peak_offset_mm: 35.0,
            peak_width_mm: 18.0,
            peak_amplitude: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyShape {
    pub assembly: String,
    pub extrap_bottom_mm: f64,
    pub extrap_top_mm: f64,
    /// Fraction of flux removed well above the absorber tip.
    pub rod_coupling: f64,
    /// Axial length scale of the transition at the absorber tip.
    pub tip_width_mm: f64,
    pub follower: Option<FollowerFeatures>,
}

impl AssemblyShape {
    /// Plain chopped cosine with no rod distortion.
    pub fn symmetric(assembly: &str, extrap_mm: f64) -> Self {
        AssemblyShape {
            assembly: assembly.to_string(),
            extrap_bottom_mm: extrap_mm,
            extrap_top_mm: extrap_mm,
            rod_coupling: 0.0,
            tip_width_mm: 30.0,
            follower: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueFluxModel {
    pub active_height_mm: f64,
    pub n_axial: usize,
    /// Range of beginning-of-cycle bank positions seen in operation.
    pub bank_range_mm: (f64, f64),
    /// Bank position at full withdrawal; 0 is full insertion.
    pub bank_travel_mm: f64,
    pub shapes: Vec<AssemblyShape>,
}

const MAX_COUPLING: f64 = 0.55;
const ROD_COUPLING_DECAY_SQ: f64 = 2.5;

impl TrueFluxModel {
    /// Shape parameters for every assembly of `layout`.
    ///
    /// Rod coupling decays with lattice distance to the nearest control
    /// assembly, so followers and their neighbours respond most strongly to
    /// bank movement.
    pub fn reference(layout: &CoreLayout) -> Self {
        let rods: Vec<(f64, f64)> = FOLLOWER_IDS
            .iter()
            .map(|id| lattice_of(id).expect("valid follower id"))
            .collect();
        let shapes = layout
            .assemblies
            .iter()
            .map(|a| {
                let (x, y) = a.lattice();
                let d2 = rods
                    .iter()
                    .map(|(rx, ry)| (x - rx).powi(2) + (y - ry).powi(2))
                    .fold(f64::INFINITY, f64::min);
                let ripple = ((x + y) as usize % 3) as f64;
                AssemblyShape {
                    assembly: a.id.clone(),
                    extrap_bottom_mm: 75.0 + 5.0 * ripple,
                    extrap_top_mm: 70.0,
                    rod_coupling: MAX_COUPLING * (-d2 / ROD_COUPLING_DECAY_SQ).exp(),
                    tip_width_mm: 30.0,
                    follower: (a.kind == AssemblyKind::Follower).then(FollowerFeatures::default),
                }
            })
            .collect();
        TrueFluxModel {
            active_height_mm: 600.0,
            n_axial: 180,
            bank_range_mm: (450.0, 550.0),
            bank_travel_mm: 800.0,
            shapes,
        }
    }

    /// Measurement positions: centres of `n_axial` equal cells along the
    /// active height.
    pub fn axial_grid(&self) -> Vec<f64> {
        let dz = self.active_height_mm / self.n_axial as f64;
        (0..self.n_axial).map(|i| (i as f64 + 0.5) * dz).collect()
    }

    pub fn axial_step_mm(&self) -> f64 {
        self.active_height_mm / self.n_axial as f64
    }

    pub fn shape(&self, assembly: &str) -> Result<&AssemblyShape> {
        self.shapes
            .iter()
            .find(|s| s.assembly == assembly)
            .ok_or_else(|| Error::Config(format!("no shape parameters for assembly {assembly}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.active_height_mm > 0.0) || self.n_axial < 2 {
            return Err(Error::Config("active height and axial count must be positive".into()));
        }
        if !(self.bank_travel_mm > 0.0) {
            return Err(Error::Config("bank travel must be positive".into()));
        }
        for s in &self.shapes {
            if s.extrap_bottom_mm < 0.0 || s.extrap_top_mm < 0.0 || s.tip_width_mm <= 0.0 {
                return Err(Error::Config(format!("invalid shape for {}", s.assembly)));
            }
            if !(0.0..1.0).contains(&s.rod_coupling) {
                return Err(Error::Config(format!("rod coupling of {} not in [0, 1)", s.assembly)));
            }
            if let Some(f) = &s.follower {
                if !(0.0..1.0).contains(&f.dip_depth) || f.peak_amplitude < 0.0 {
                    return Err(Error::Config(format!("invalid follower features for {}", s.assembly)));
                }
            }
        }
        Ok(())
    }

    /// Noise-free relative flux of `assembly` at axial height `z_mm` with the
    /// bank tip at `bank_mm`.
    pub fn true_flux(&self, assembly: &AssemblyDescriptor, bank_mm: f64, z_mm: f64) -> Result<f64> {
        let shape = self.shape(&assembly.id)?;
        self.flux_with_shape(shape, bank_mm, z_mm)
    }

    pub fn flux_with_shape(&self, shape: &AssemblyShape, bank_mm: f64, z_mm: f64) -> Result<f64> {
        let h = self.active_height_mm;
        if !z_mm.is_finite() || !(0.0..=h).contains(&z_mm) {
            return Err(Error::Domain(format!("z = {z_mm} mm outside active height [0, {h}]")));
        }
        if !bank_mm.is_finite() || !(0.0..=self.bank_travel_mm).contains(&bank_mm) {
            return Err(Error::Domain(format!(
                "bank = {bank_mm} mm outside travel [0, {}]",
                self.bank_travel_mm
            )));
        }
        let extrapolated = h + shape.extrap_bottom_mm + shape.extrap_top_mm;
        let centre = 0.5 * (h + shape.extrap_top_mm - shape.extrap_bottom_mm);
        let cosine = (PI * (z_mm - centre) / extrapolated).cos();

        let above_tip = logistic((z_mm - bank_mm) / shape.tip_width_mm);
        let mut flux = cosine * (1.0 - shape.rod_coupling * above_tip);

        if let Some(f) = &shape.follower {
            let dip = gaussian_bump(z_mm, bank_mm - f.dip_offset_mm, f.dip_width_mm);
            let peak = gaussian_bump(z_mm, bank_mm - f.peak_offset_mm, f.peak_width_mm);
            flux *= (1.0 - f.dip_depth * dip) * (1.0 + f.peak_amplitude * peak);
        }
        Ok(flux)
    }

    /// True flux over the full axial grid.
    pub fn profile(&self, assembly: &AssemblyDescriptor, bank_mm: f64) -> Result<Vec<f64>> {
        self.axial_grid()
            .into_iter()
            .map(|z| self.true_flux(assembly, bank_mm, z))
            .collect()
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn gaussian_bump(z: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((z - centre) / width).powi(2)).exp()
}

/// Profile divided by its mean.
pub fn normalized_profile(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v / mean).collect()
}

/// Root-mean-square distance between two equally long profiles.
pub fn profile_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (ss / a.len() as f64).sqrt()
}
