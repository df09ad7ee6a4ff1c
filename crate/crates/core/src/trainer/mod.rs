//! Configuration, data, model families and the run drivers behind the CLI.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod coverage;
pub mod data;
pub mod models;
pub mod profile;
pub mod train;

pub use audit::{run_spectrum_audit, AuditReport, AuditRow};
pub use checkpoint::{describe, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Task, TrainConfig};
pub use coverage::{coverage_summary, run_coverage, simulate_coverage, CoverageKind, CoverageResult};
pub use data::{load_text_corpus, unigram_entropy};
pub use profile::{run_profile, ProfilePath, ProfileReport};
pub use train::{run_train, TrainSummary, METRICS_HEADER};
