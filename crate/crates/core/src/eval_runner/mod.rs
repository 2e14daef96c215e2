//! Configured evaluation runs: sampling, per-episode prompting and scoring,
//! resumable results files, reports and ablation sweeps.

mod ablate;
mod config;
mod report;
mod results;
mod runner;

use thiserror::Error;

use crate::backend_gateway::BackendError;
use crate::canvas_geometry::GeometryError;
use crate::data_ingest::IngestError;
use crate::metrics::MetricError;

pub use ablate::{ablate, ablate_with, AblateOutcome, SweepDelta, SweepSpec, SWEEPABLE};
pub use config::{apply_override, parse_override, RunConfig, MOCK_PERFECT};
pub use report::{
    build_report, report_files, scenario_label, write_report, ReportRow, ReportTable,
    ReportTemplate, RunEntry,
};
pub use results::{
    EpisodeResult, EpisodeStatus, PromptSummary, ResultLine, ResultsFile, ResultsHeader,
    ResultsWriter, FORMAT_VERSION, RESULTS_FILE, SUMMARY_FILE,
};
pub use runner::{
    compose_episode, prepare, resolve_fold, run, run_episode, run_prepared, run_with_backend,
    summarize, ClassSummary, ComposedEpisode, Prepared, RunOutcome, RunSummary,
    MAX_FAILED_FRACTION, ORACLE_DISTRACTOR_SCORE,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("backend: {0}")]
    Backend(BackendError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("results: {0}")]
    Results(String),
    #[error("report: {0}")]
    Report(String),
    #[error("{failed} of {total} episodes failed")]
    TooManyFailures { failed: usize, total: usize },
}

impl From<BackendError> for RunError {
    fn from(e: BackendError) -> Self {
        RunError::Backend(e)
    }
}
