use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration, missing inputs or incompatible files.
    #[error("config error: {0}")]
    Config(String),
    /// Failure after a run has started.
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("non-finite loss at step {step}; diagnostics in {dump}")]
    NonFinite { step: u64, dump: String },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Runtime(_) | HarnessError::NonFinite { .. } => 2,
        }
    }
}

impl From<slp_core::Error> for HarnessError {
    fn from(e: slp_core::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}
