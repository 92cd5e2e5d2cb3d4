use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("semantic class {class} has zero probability mass")]
    ZeroMassClass { class: usize },

    #[error("tool lookup miss for key {0}")]
    LookupMiss(String),

    #[error("unparseable tool call after {attempts} attempt(s): {raw:?}")]
    UnparseableToolCall { raw: String, attempts: usize },

    #[error("enumeration too large: {size} joint entries (limit {limit})")]
    SizeLimit { size: usize, limit: usize },

    #[error("missing entropy term: {0}")]
    MissingTerm(&'static str),

    #[error("generator failure: {0}")]
    Generator(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("malformed upstream payload: {0}")]
    Upstream(String),

    #[error("upstream response carries no token log-probabilities")]
    MissingLogprobs,

    #[error("AUROC undefined: labels contain only {0} examples")]
    UndefinedAuroc(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Generator(_) | Error::Transport(_) | Error::Upstream(_) | Error::MissingLogprobs => 2,
            Error::UndefinedAuroc(_) => 3,
            _ => 1,
        }
    }

    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::Generator(msg) => Error::Generator(format!("{what}: {msg}")),
            Error::Transport(msg) => Error::Transport(format!("{what}: {msg}")),
            Error::Upstream(msg) => Error::Upstream(format!("{what}: {msg}")),
            other => other,
        }
    }
}
