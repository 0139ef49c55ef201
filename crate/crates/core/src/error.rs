use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("point {point:?} lies outside the domain")]
    Domain { point: Vec<f64> },

    #[error("numerical consistency violated: {0}")]
    Numerical(String),

    #[error(
        "Gram matrix for action {action} is not positive definite with lambda = {lambda}; \
         use a strictly positive regularization"
    )]
    Regularization { action: usize, lambda: f64 },

    #[error(
        "ambiguity set for state {state}, action {action} is empty: minimal squared MMD \
         {min_sq:.6e} exceeds eps^2 = {eps_sq:.6e}; increase eps or use finer data"
    )]
    InfeasibleAbstraction {
        state: usize,
        action: usize,
        min_sq: f64,
        eps_sq: f64,
    },

    #[error("QCLP infeasible: minimal squared MMD exceeds eps^2 by {gap:.6e}")]
    Infeasible { gap: f64 },

    #[error("solver budget exhausted after {iterations} iterations; best certified bound {bound}")]
    SolverBudget { iterations: usize, bound: f64 },

    #[error("inner solve failed at state {state}, action {action}, sweep {sweep}: {source}")]
    InnerSolve {
        state: usize,
        action: usize,
        sweep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model configuration: {0}")]
    Model(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("validation bracket violated in {count} region(s)")]
    Bracket { count: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("container: {0}")]
    Container(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 infeasible abstraction,
    /// 4 solver failure, 5 validation bracket violated, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::InnerSolve { source, .. } => match source.exit_code() {
                3 => 3,
                _ => 4,
            },
            Error::Config { .. } | Error::Regularization { .. } => 2,
            Error::InfeasibleAbstraction { .. } | Error::Infeasible { .. } => 3,
            Error::SolverBudget { .. } | Error::Numerical(_) => 4,
            Error::Bracket { .. } => 5,
            _ => 1,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
