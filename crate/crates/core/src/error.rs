use thiserror::Error;

/// Errors raised by table construction, estimation and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema: {0}")]
    Schema(String),

    #[error("record {record}: attribute `{attribute}` level {level} out of range (0..{levels})")]
    LevelOutOfRange {
        record: usize,
        attribute: String,
        level: i64,
        levels: u32,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("post-stratification: {0}")]
    Strata(String),

    #[error("table mismatch: {0}")]
    TableMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Csv(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
