//! Batch experiment orchestration: strict config parsing, sweep execution
//! over skill levels and seeds with per-cell artifacts and resume support,
//! and aggregation into summary tables.

pub mod config;
pub mod experiment;
pub mod summary;

pub use config::{
    BlobSpec, DatasetSpec, EmSchedule, ExperimentConfig, IdxSpec, Method, PopulationSpec,
    parse_config,
};
pub use experiment::{
    load_results_csv, run_simulate, run_sweep, run_train_single, save_results_csv,
    save_timings_csv, semantic_config_hash, table_hash, ResultRow, RunStatus,
};
pub use summary::{save_summary_csv, save_summary_markdown, summarize, SummaryRow};
