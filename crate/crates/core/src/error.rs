use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in factor `{factor}`: {message}")]
    Dimension { factor: String, message: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("unknown factor label `{0}`")]
    UnknownFactor(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported parameters: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integration failure: {0}")]
    Integration(String),

    #[error("truncation leakage {leakage:.3e} exceeds bound in `{context}`")]
    Truncation { context: String, leakage: f64 },

    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
