//! Experiment driver: world generation, memorization training, unlearning,
//! evaluation and hyperparameter sweeps, all configured by one flat
//! `key = value` config whose keys double as command-line flags.

pub mod commands;
pub mod config;
pub mod pipeline;

use thiserror::Error;
use unlearnlab::evalkit::EvalError;
use unlearnlab::microlm::ModelError;
use unlearnlab::unlearn::UnlearnError;
use unlearnlab::worldgen::WorldError;

pub use config::{registry, Precision, RunConfig, Seeds};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    /// 2 config, 3 convergence, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::BadLearningRate(_) => {
                CliError::Config(e.to_string())
            }
            ModelError::Autograd(unlearnlab::autograd::AutogradError::NonFinite { .. }) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Other(other.into()),
        }
    }
}

impl From<UnlearnError> for CliError {
    fn from(e: UnlearnError) -> Self {
        match e {
            UnlearnError::Config(_) => CliError::Config(e.to_string()),
            UnlearnError::NonFinite(_) | UnlearnError::NanScore => CliError::Numeric(e.to_string()),
            UnlearnError::Model(m) => m.into(),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Other(other.into()),
        }
    }
}
