//! Experiment driver: configuration, staged pipeline, ablation and
//! analysis outputs.

mod config;
mod methods;
mod pipeline;
mod report;
mod stats;

pub use config::{ExperimentConfig, Profile};
pub use methods::{evaluate_methods, Corner, EpisodeResult, Method};
pub use pipeline::*;
pub use report::{
    export_snapshots, read_history, write_history, write_point_biserial, write_results, AblationReport, ReportRow,
};
pub use stats::{confidence_interval, pearson, point_biserial, BitCorrelation};
