use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric failure: {what}{}", step.map(|t| format!(" (step {t})")).unwrap_or_default())]
    NumericFailure { what: String, step: Option<usize> },

    #[error("construction failure: {0}")]
    ConstructionFailure(String),
}

impl GmdError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GmdError::InvalidArgument(msg.into())
    }

    pub fn numeric(what: impl Into<String>) -> Self {
        GmdError::NumericFailure { what: what.into(), step: None }
    }

    /// Attaches a step index to a numeric failure; other variants pass through.
    pub fn at_step(self, t: usize) -> Self {
        match self {
            GmdError::NumericFailure { what, step: None } => GmdError::NumericFailure { what, step: Some(t) },
            other => other,
        }
    }
}

pub type Result<T, E = GmdError> = std::result::Result<T, E>;
