use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("step {step} outside 0..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },

    #[error("invalid gaussian mixture: {0}")]
    Mixture(String),

    #[error("invalid point cloud: {0}")]
    Cloud(String),

    #[error("invalid solver configuration: {0}")]
    SolverConfig(String),

    #[error("invalid step range {from} -> {to} for a {steps}-step schedule")]
    StepRange { from: usize, to: usize, steps: usize },

    #[error("non-finite state at t = {time} (point {point}); reduce the step size")]
    NonFinite { time: f64, point: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("induced assignment is not a bijection: target {target} receives sources {first} and {second}")]
    NotBijective { target: usize, first: usize, second: usize },

    #[error("induced assignment is not a bijection: target {target} receives no source")]
    UncoveredTarget { target: usize },

    #[error("unsupported transport problem: {0}")]
    Unsupported(String),

    #[error("semi-discrete OT did not converge: residual {residual:.3e} > {tolerance:.1e} after {iterations} iterations")]
    NotConverged {
        residual: f64,
        tolerance: f64,
        iterations: usize,
    },

    #[error("model has no trained OT map for direction {0}")]
    MissingMap(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
