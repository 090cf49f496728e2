use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("graph not connected after {tries} attempts")]
    Disconnected { tries: usize },

    #[error("network: {0}")]
    Network(String),

    #[error("problem construction: {0}")]
    Problem(String),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("subproblem{} did not converge: residual {residual:.3e} after {iterations} iterations", agent_suffix(*.agent))]
    Subproblem {
        agent: Option<usize>,
        residual: f64,
        iterations: usize,
        best: Vec<f64>,
    },

    #[error("centralized solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    Oracle { residual: f64, iterations: usize },

    #[error("step size {alpha} is not below the certified bound {alpha_max}")]
    StepSize { alpha: f64, alpha_max: f64 },

    #[error("z = {z} outside admissible window: {bound}")]
    Domain { z: f64, bound: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("fit: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn agent_suffix(agent: Option<usize>) -> String {
    match agent {
        Some(i) => format!(" at agent {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Toml(_) | Error::Json(_))
    }

    pub(crate) fn with_agent(self, i: usize) -> Self {
        match self {
            Error::Subproblem {
                residual,
                iterations,
                best,
                ..
            } => Error::Subproblem {
                agent: Some(i),
                residual,
                iterations,
                best,
            },
            other => other,
        }
    }
}
