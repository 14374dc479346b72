//! Campaign data to supervised datasets.
//!
//! The pipeline order is fixed: decay correction, low-count rejection,
//! optional smoothing, then normalization.

mod dataset;
mod decay;
mod savgol;
mod zscore;

pub use dataset::{
    build_dataset, partition, read_dataset_csv, write_dataset_csv, DatasetSidecar, RegressionDataset, Sample, Split,
    DEFAULT_FRACTIONS,
};
pub use decay::{
    decay_correct, decay_correct_campaign, decay_correct_cycle, reject_low_count_cycles, DEFAULT_COUNT_THRESHOLD,
};
pub use savgol::{savgol_filter, savgol_filter_gaps, SmoothSettings};
pub use zscore::{zscore_apply, zscore_fit, zscore_invert, NormalizationState, ZScore};
