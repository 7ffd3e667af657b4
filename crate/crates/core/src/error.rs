use thiserror::Error;

pub type Result<T> = std::result::Result<T, ErgoError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErgoError {
    /// Inconsistent dimensions or invalid structural parameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("parameter `{name}` = {value} out of range {range}")]
    Range { name: String, value: f64, range: String },

    /// A model map produced a non-finite value.
    #[error("evaluation error: {what} is not finite at coordinate {coordinate}")]
    Evaluation { what: String, coordinate: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("quadrature did not converge: achieved tolerance {achieved:e}, requested {requested:e}")]
    Quadrature { achieved: f64, requested: f64 },

    #[error("rejection envelope failure: acceptance rate {rate:e} below 1e-3; supply a custom envelope")]
    Envelope { rate: f64 },

    #[error("sample size error: {got} samples, need at least {need}")]
    SampleSize { got: usize, need: usize },

    #[error("fit window error: {usable} usable points (need 3); curve = {curve}")]
    FitWindow { usable: usize, curve: String },

    #[error("censoring error: {fraction:.3} of samples censored (limit 0.5)")]
    Censored { fraction: f64 },

    #[error("diagnostic: {0}")]
    Diagnostic(String),

    #[error("all {diverged} paths diverged past the overflow guard")]
    Diverged { diverged: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ErgoError {
    fn from(e: std::io::Error) -> Self {
        ErgoError::Io(e.to_string())
    }
}

pub(crate) fn ensure_range(name: &str, value: f64, ok: bool, range: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ErgoError::Range { name: name.to_string(), value, range: range.to_string() })
    }
}
