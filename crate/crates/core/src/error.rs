use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("density is negative ({value:e}) at node (t={t}, i={i}, j={j})")]
    DomainViolation { t: usize, i: usize, j: usize, value: f64 },

    #[error("density/flux root solve did not converge at node (t={t}, i={i}, j={j})")]
    RootFinder { t: usize, i: usize, j: usize },

    #[error("{what} did not converge: residual {residual:e} after {iterations} iterations")]
    SolverFailed {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error("singular 3x3 adjoint system at node (t={t}, i={i}, j={j})")]
    SingularResolvent { t: usize, i: usize, j: usize },

    #[error("background kernel fit is ill-posed: {0}")]
    IllFit(String),

    #[error("inversion aborted at iteration {iteration}: {reason}")]
    Aborted { iteration: usize, reason: String },

    #[error("no dataset found in {0}")]
    NoDataset(PathBuf),

    #[error("schema error in {file}:{line}: {message}")]
    Schema {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
