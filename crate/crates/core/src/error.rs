use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("unknown suite family `{0}`")]
    UnknownFamily(String),

    #[error("local update diverged on client {client} at inner step {step}")]
    DivergedLocalUpdate { client: usize, step: usize },

    #[error("non-finite iterate at round {round}")]
    DivergedIterate { round: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("schedule infeasible: condition `{condition}` violated ({detail})")]
    ScheduleInfeasible { condition: String, detail: String },

    #[error("theory condition `{condition}` violated: {detail}")]
    TheoryCondition { condition: String, detail: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True when the error stems from a non-finite local or global iterate.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::DivergedLocalUpdate { .. } | Error::DivergedIterate { .. }
        )
    }
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
