//! End-to-end orchestration: manifest → plans → inpainting → crops →
//! triplet scores → evaluation, plus parameter sweeps and report files.

mod config;
pub mod plots;
mod report;
mod run;
mod sweep;

use thiserror::Error;

pub use config::{
    sha256_hex, BackendSelector, Fingerprint, Resolution, RunConfig, DEFAULT_MASK_RATIO,
};
pub use report::{
    evaluate_records, read_score_records, report, report_from_scores, write_report,
    write_score_records, ReportDocument, HIST_FILE, REPORT_FILE, ROC_FILE, SWEEP_FILE,
};
pub use run::{
    run, run_with, AblationRow, Backends, ErrorRecord, MetricPair, RunResult, StageTimes,
    ERRORS_FILE, SCORES_FILE,
};
pub use sweep::{sweep, sweep_with, SweepAxis, SweepOutcome, SweepPoint};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(#[from] crate::detections_io::ManifestError),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl PipelineError {
    /// Process exit code: 1 for configuration or input problems, 2 when a
    /// backend is unusable.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<csv::Error> for PipelineError {
    fn from(e: csv::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}
