//! Configuration-driven pipeline: generate, preprocess, search, train,
//! predict and evaluate, with digest-gated stage reuse.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod run;

pub use config::RunConfig;
pub use manifest::RunManifest;
pub use run::run_pipeline;
