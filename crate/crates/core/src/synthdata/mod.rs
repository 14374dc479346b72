//! Synthetic ground truth and copper-wire measurement campaigns.
//!
//! [`TrueFluxModel`] is a smooth analytic stand-in for the reactor: a chopped
//! cosine on an extrapolated height, suppressed above the control-absorber
//! tip, with a coupling-piece dip and a top-end thermal peak for follower
//! assemblies. The simulator turns it into Poisson counts, applies
//! scan-order decay and optional defects, and keeps the labels needed to
//! score everything downstream.

mod campaign;
mod flux;
mod layout;

pub use campaign::{
    expected_cycle, simulate_campaign, simulate_cycle, simulate_cycle_with_truth, AxialProfile, BankSampler, Campaign,
    CycleTruth, DefectKind, DefectLabel, DefectSpec, MeasurementCycle, ScanSchedule, CAMPAIGN_FORMAT, CU64_HALF_LIFE_H,
};
pub use flux::{normalized_profile, profile_distance, AssemblyShape, FollowerFeatures, TrueFluxModel};
pub use layout::{AssemblyDescriptor, AssemblyKind, CoreLayout, FOLLOWER_IDS};
