use thiserror::Error;

/// Errors raised across the simulation and estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("schedule error: violated relation {relation}: {detail}")]
    Schedule { relation: String, detail: String },

    #[error("blow-up at step {step}: {detail}")]
    BlowUp { step: usize, detail: String },

    #[error("prerequisite missing: {0}")]
    Prerequisite(String),

    #[error("ill-conditioned request: {0}")]
    IllConditioned(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("regime rejected: {0}")]
    Regime(String),
}

impl Error {
    /// True for errors caused by the request itself rather than by the run.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_)
                | Error::Argument(_)
                | Error::Configuration(_)
                | Error::Schedule { .. }
                | Error::Regime(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
