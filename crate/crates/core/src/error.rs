use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },
    #[error("nonpositive step size")]
    NonPositiveStep,
    #[error("invalid parameter layout: {0}")]
    Layout(String),
    #[error("episode finished")]
    EpisodeFinished,
    #[error("unknown {kind} `{name}` (valid: {valid})")]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: String,
    },
    #[error("dataset holds {available} tuples but {requested} were requested")]
    DatasetTooSmall { available: usize, requested: usize },
    #[error("degenerate representation")]
    DegenerateRepresentation,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("strategy inapplicable: {0}")]
    StrategyInapplicable(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("distribution not normalized: {0}")]
    NotNormalized(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("missing {0}")]
    Missing(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn unknown(kind: &'static str, name: &str, valid: &[&str]) -> Self {
        Error::UnknownName {
            kind,
            name: name.to_string(),
            valid: valid.join(", "),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
