//! Data ingestion, experiment sweeps and reporting.

pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;

pub use data::{gen_synthetic, load_profiles_csv, split_dataset, write_profiles_csv, SyntheticParams};
pub use experiment::{
    emit_report, run_experiment, run_on_split, DataSource, Entry, ExperimentConfig, Method, Report,
    Sweeps,
};
pub use metrics::rsol;
pub use model::{EncodeRule, Model};
