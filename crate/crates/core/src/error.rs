use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate schedule: sigma is zero at t={t}")]
    DegenerateSchedule { t: usize },

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("record error: {0}")]
    Record(String),

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("numerical blowup at t={t}: non-finite value in {what}")]
    NumericalBlowup { t: usize, what: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
