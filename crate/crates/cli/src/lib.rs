//! Pipeline driver behind the `dendroclim` binary.
//!
//! Stages run in a fixed order and communicate only through files in the
//! output directory, so any stage can be rerun on its own once its inputs
//! exist.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, RunOutcome, Stage};

use std::fmt;

/// Errors surfaced to the command line, each with its exit status.
#[derive(Debug)]
pub enum PipelineError {
    Config(String),
    Data(String),
    /// A stage needs a file that another stage writes.
    MissingArtifact {
        artifact: String,
        stage: Stage,
    },
    /// A sampler diverged and produced no output.
    Diverged(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::MissingArtifact { .. } => 3,
            PipelineError::Diverged(_) => 4,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config(m) => write!(f, "configuration error: {m}"),
            PipelineError::Data(m) => write!(f, "data error: {m}"),
            PipelineError::MissingArtifact { artifact, stage } => {
                write!(f, "missing {artifact}; run the `{}` stage first", stage.name())
            }
            PipelineError::Diverged(m) => write!(f, "sampler diverged: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<dendroclim::Error> for PipelineError {
    fn from(e: dendroclim::Error) -> Self {
        match e {
            dendroclim::Error::Config(m) => PipelineError::Config(m),
            dendroclim::Error::Divergence(m) => PipelineError::Diverged(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}
