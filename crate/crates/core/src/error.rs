use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("trajectory {index}: {detail}")]
    Trajectory { index: usize, detail: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid action {action} from item {current}")]
    InvalidAction { current: String, action: String },
    #[error("no legal actions from item {0}")]
    NoLegalActions(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("rating {rating} outside [0, {max}]")]
    RatingOutOfRange { rating: f64, max: f64 },
    #[error("action distribution for state {state} sums to {total}")]
    NotNormalized { state: usize, total: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
