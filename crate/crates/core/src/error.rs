use thiserror::Error;

use crate::pathfollow::RunMetrics;
use crate::pipeline::StageReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate identification data: {0}")]
    DegenerateData(String),

    #[error("simulation diverged: {0}")]
    SimulationDiverged(String),

    #[error("training diverged: {loss} loss is {value}")]
    TrainingDiverged { loss: &'static str, value: f64 },

    /// Backward pass requested without a matching recorded forward pass.
    #[error("no recorded forward pass: {0}")]
    NoForwardRecorded(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sub-goal {subgoal} not reached within {timeout_s} s")]
    FollowFailed {
        subgoal: usize,
        timeout_s: f64,
        partial: Box<RunMetrics>,
    },

    #[error("stage {stage} failed its gate after {attempts} attempt(s): {metric} = {value:.4} < {threshold:.4}")]
    GateFailed {
        stage: usize,
        attempts: usize,
        metric: String,
        value: f64,
        threshold: f64,
        report: Box<StageReport>,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Innermost error, looking through stage context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
