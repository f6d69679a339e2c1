//! End-to-end evaluation: synthetic data, multi-trial runs, caching and reports.

pub mod cache;
pub mod config;
pub mod report;
pub mod synth;
pub mod trial;

pub use cache::{KeyBuilder, StageCache};
pub use config::ExperimentConfig;
pub use report::{write_report, ReportPaths};
pub use synth::{make_synthetic, SynthOptions, SyntheticSet};
pub use trial::{evaluate, run_trial, trial_seeds, Corpus, ImagePrediction, Prepared, TrialResult};
