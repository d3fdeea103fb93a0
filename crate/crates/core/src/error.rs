use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in {context}{}", .index.map(|i| format!(" (atom {i})")).unwrap_or_default())]
    NumericDomain {
        context: String,
        index: Option<usize>,
    },

    /// Fixed-point or Newton iteration did not reach its tolerance.
    #[error("{context} did not converge; last gaps {last_gaps:?}")]
    ConvergenceFailure {
        context: String,
        last_gaps: Vec<f64>,
    },

    #[error("regression normal equations are singular at step {step}")]
    IllConditioned { step: usize },

    /// Block length fell below the configured floor during the long-horizon recursion.
    #[error("block length {delta} fell below delta_min = {delta_min}")]
    BlowUp { delta: f64, delta_min: f64 },

    #[error("Riccati oracle blew up at t = {t}")]
    OracleBlowUp { t: f64 },

    #[error("measure derivative requested off the support of the measure")]
    OffSupport,

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>, index: Option<usize>) -> Self {
        Error::NumericDomain {
            context: context.into(),
            index,
        }
    }
}
