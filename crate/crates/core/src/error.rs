use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("numerical failure{}: {message}", layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Numerical { layer: Option<usize>, message: String },

    #[error(
        "basis generation infeasible after {iterations} iterations: pair ({}, {}) has |cos| = {worst_cos:.6}, residual loss {residual:.6e}",
        worst_pair.0, worst_pair.1
    )]
    Infeasible {
        iterations: usize,
        worst_pair: (usize, usize),
        worst_cos: f64,
        residual: f64,
    },

    #[error("class {0} is already bound to a basis vector")]
    AlreadyBound(u32),

    #[error("basis capacity exhausted: {capacity} vectors, {requested} more requested")]
    Capacity { capacity: usize, requested: usize },

    #[error("class {0} is not bound to any basis vector")]
    Unbound(u32),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("split spec error: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training data of task {task} is sealed")]
    Sealed { task: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn numerical(layer: Option<usize>, message: impl Into<String>) -> Self {
        Error::Numerical { layer, message: message.into() }
    }

    /// Process exit code: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } | Error::Infeasible { .. } => 3,
            _ => 2,
        }
    }
}
