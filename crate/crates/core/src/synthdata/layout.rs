use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Follower-type control assembly positions.
pub const FOLLOWER_IDS: [&str; 6] = ["C5", "C7", "E5", "E7", "G5", "G7"];

const FUEL_IDS: [&str; 26] = [
    "B5", "B6", "B7", "C3", "C4", "C6", "C8", "D3", "D4", "D5", "D6", "D7", "D8", "E3", "E4", "E6", "E8", "F3", "F4",
    "F5", "F6", "F7", "F8", "G4", "G6", "H3",
];

const CENTER_ID: &str = "E6";
/// Squared lattice length of the radial count falloff, in lattice pitches.
const RADIAL_FALLOFF_SQ: f64 = 11.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyKind {
    Fuel,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyDescriptor {
    pub id: String,
    pub kind: AssemblyKind,
    /// Count-magnitude factor in (0, 1]; 1 at the core centre.
    pub radial_weight: f64,
}

impl AssemblyDescriptor {
    /// (column, row) lattice coordinates parsed from ids like `"E6"`.
    pub fn lattice(&self) -> (f64, f64) {
        lattice_of(&self.id).unwrap_or((0.0, 0.0))
    }
}

pub(crate) fn lattice_of(id: &str) -> Option<(f64, f64)> {
    let mut chars = id.chars();
    let col = chars.next()?;
    if !col.is_ascii_uppercase() {
        return None;
    }
    let row: u32 = chars.as_str().parse().ok()?;
    Some(((col as u8 - b'A') as f64, row as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreLayout {
    pub assemblies: Vec<AssemblyDescriptor>,
}

impl CoreLayout {
    /// The 9x8 lattice loading: 26 fuel assemblies and 6 followers, with
    /// count magnitude falling off as a Gaussian in lattice distance from E6.
    pub fn reference() -> Self {
        let (cx, cy) = lattice_of(CENTER_ID).expect("valid centre id");
        let mut assemblies: Vec<AssemblyDescriptor> = FUEL_IDS
            .iter()
            .map(|id| (id, AssemblyKind::Fuel))
            .chain(FOLLOWER_IDS.iter().map(|id| (id, AssemblyKind::Follower)))
            .map(|(id, kind)| {
                let (x, y) = lattice_of(id).expect("valid id");
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                AssemblyDescriptor {
                    id: id.to_string(),
                    kind,
                    radial_weight: (-d2 / RADIAL_FALLOFF_SQ).exp(),
                }
            })
            .collect();
        assemblies.sort_by(|a, b| a.id.cmp(&b.id));
        CoreLayout { assemblies }
    }

    pub fn get(&self, id: &str) -> Option<&AssemblyDescriptor> {
        self.assemblies.iter().find(|a| a.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.assemblies.iter().map(|a| a.id.as_str())
    }

    /// Assembly with the largest radial weight.
    pub fn central(&self) -> &AssemblyDescriptor {
        self.assemblies
            .iter()
            .max_by(|a, b| a.radial_weight.total_cmp(&b.radial_weight))
            .expect("non-empty layout")
    }

    /// Fuel assembly with the smallest radial weight.
    pub fn most_peripheral_fuel(&self) -> &AssemblyDescriptor {
        self.assemblies
            .iter()
            .filter(|a| a.kind == AssemblyKind::Fuel)
            .min_by(|a, b| a.radial_weight.total_cmp(&b.radial_weight))
            .expect("layout has fuel")
    }

    pub fn validate(&self) -> Result<()> {
        if self.assemblies.is_empty() {
            return Err(Error::Config("layout has no assemblies".into()));
        }
        for a in &self.assemblies {
            if !(a.radial_weight > 0.0 && a.radial_weight <= 1.0) {
                return Err(Error::Config(format!(
                    "assembly {} has radial weight {} outside (0, 1]",
                    a.id, a.radial_weight
                )));
            }
        }
        let mut ids: Vec<&str> = self.ids().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.assemblies.len() {
            return Err(Error::Config("duplicate assembly ids in layout".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_layout_counts() {
        let layout = CoreLayout::reference();
        layout.validate().unwrap();
        assert_eq!(layout.assemblies.len(), 32);
        let followers: Vec<&str> = layout
            .assemblies
            .iter()
            .filter(|a| a.kind == AssemblyKind::Follower)
            .map(|a| a.id.as_str())
            .collect();
        assert_eq!(followers, FOLLOWER_IDS.to_vec());
    }

    #[test]
    fn centre_is_unique_maximum() {
        let layout = CoreLayout::reference();
        assert_eq!(layout.central().id, "E6");
        assert_eq!(layout.central().radial_weight, 1.0);
        let others = layout.assemblies.iter().filter(|a| a.id != "E6");
        assert!(others
            .into_iter()
            .all(|a| a.radial_weight < 1.0 && a.radial_weight > 0.0));
        assert_eq!(layout.most_peripheral_fuel().id, "H3");
    }
}
