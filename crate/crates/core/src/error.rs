use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("IMU gap of {gap:.6} s at t = {t:.6} exceeds the limit of {max_dt} s")]
    Gap { t: f64, gap: f64, max_dt: f64 },

    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),

    #[error("initialization failed: {0}")]
    InitializationFailed(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("landmark behind camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },

    #[error("gauge not fixed: {0}")]
    GaugeDeficient(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(file: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse { file: file.into(), message: message.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
