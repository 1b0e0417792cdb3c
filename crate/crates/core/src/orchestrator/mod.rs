//! Closed-loop orchestration: configuration, the discrete-event run loop,
//! reports, replay and the Stage-2 delay sweep.

pub mod config;
pub mod engine;
pub mod queue;
pub mod report;
pub mod scenario;
pub mod sweep;

use thiserror::Error;

use crate::audit::AuditError;
use crate::timebase::TimestampNs;

pub use config::{ResolvedConfig, RunConfig, Termination};
pub use engine::{run, write_artifacts, RunOutput};
pub use report::{replay_report, StageReport};
pub use sweep::{run_sweep, SweepConfig, SweepResult};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {msg} (line {line}, column {column})")]
    Parse { path: String, line: usize, column: usize, msg: String },
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot read {0}: {1}")]
    Io(String, String),
}

impl ConfigError {
    pub fn invalid(field: &str, msg: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.into(), msg: msg.into() }
    }

    /// Prefix the reported location with the field that referenced the
    /// document.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            ConfigError::Parse { path, line, column, msg } => {
                ConfigError::Parse { path: format!("{prefix}:{path}"), line, column, msg }
            }
            ConfigError::Invalid { field, msg } => ConfigError::Invalid { field: format!("{prefix}:{field}"), msg },
            other => other,
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("setup: {0}")]
    Setup(String),
    #[error("audit: {0}")]
    Audit(#[from] AuditError),
    #[error("event scheduled at {t} is before current time {now}")]
    Scheduling { now: TimestampNs, t: TimestampNs },
    #[error("replay: {0}")]
    Replay(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
