use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: u64 },

    #[error("query has no terms")]
    EmptyQuery,

    #[error("cannot normalize a zero vector ({0} tower)")]
    Normalization(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss requires at least one positive")]
    EmptyPositives,

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("untrainable: {0}")]
    Untrainable(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String, last_good: Box<crate::two_tower::PrerankParams> },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
