use thiserror::Error;

/// Errors raised across the design-evaluation engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("root not bracketed on [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("spending error: {0}")]
    Spending(String),

    #[error("graph state error: {0}")]
    State(String),

    #[error("missing data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("analysis trigger unreachable: {what} needs {target} events but only {achievable} can occur")]
    Scheduling {
        what: String,
        target: usize,
        achievable: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
