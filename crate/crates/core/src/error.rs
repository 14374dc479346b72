use crate::nncore::TrainHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at layer {layer}: {what}")]
    Numeric { layer: usize, what: String },
    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize, history: Box<TrainHistory> },
    #[error("search failed: all {trials} trials diverged ({})", .log.join("; "))]
    Search { trials: usize, log: Vec<String> },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("model file rejected: {0}")]
    ModelFormat(String),
    #[error("model mode mismatch: expected {expected}, found {found}")]
    ModeMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    ///
    /// 2 = configuration, 3 = data, 4 = numeric or training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::ModeMismatch { .. } | Error::Shape { .. } => 2,
            Error::Domain(_)
            | Error::Data(_)
            | Error::Normalization(_)
            | Error::Metric(_)
            | Error::Report(_)
            | Error::ModelFormat(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
            Error::Numeric { .. } | Error::Training { .. } | Error::Search { .. } => 4,
        }
    }
}
