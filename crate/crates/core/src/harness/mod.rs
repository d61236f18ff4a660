//! Experiment harness: a virtual-time bench with a capture tap, a TCP
//! baseline, capture analysis and report comparison.

pub mod experiment;
pub mod migration;
pub mod pcap;
pub mod report;
pub mod sim;
pub mod southbound;
pub mod tcp;

pub use experiment::{run_experiment, run_experiment_with, Experiment, ExperimentConfig, SAFE_RATE_LIMIT};
pub use migration::{migration_trace, run_migration, MigrationComparison, MigrationTrace, TracePoint};
pub use pcap::{analyze_capture, CaptureError, CaptureSummary, FlowFilter};
pub use report::{compare, reduction_pct, render_table, ComparisonRow, ExperimentReport, TrafficReport};
pub use southbound::TransportKind;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("launch failure: {0}")]
    LaunchFailure(String),
    #[error("capture and counters disagree: counted {counted} B, captured {captured} B")]
    AccountingGap { counted: u64, captured: u64 },
    #[error("accounting error: {0}")]
    Accounting(String),
    #[error("path did not resume: {0}")]
    ResumeFailure(String),
    #[error("scenario {scenario} has no {missing} report")]
    MissingPair { scenario: String, missing: TransportKind },
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
