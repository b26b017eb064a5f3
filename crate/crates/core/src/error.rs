use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate entry for series {id:?} at t={t}")]
    Duplicate { id: String, t: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("empty input sequence")]
    EmptyInput,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("model output error: {0}")]
    ModelOutput(String),

    #[error("failed to start server on {addr}: {message}")]
    Startup { addr: String, message: String },

    #[error("reference loss {loss_reference} below epsilon for series {series_id:?}")]
    DegenerateReference { series_id: String, loss_reference: f64 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate aggregate: {0}")]
    DegenerateAggregate(String),

    #[error("series {series_id:?} skipped: {reason}")]
    SkippedSeries { series_id: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error marks a degenerate-but-expected condition (as opposed
    /// to a fatal failure) in aggregate runs.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::DegenerateReference { .. }
                | Error::DegenerateLabels(_)
                | Error::DegenerateInput(_)
                | Error::DegenerateAggregate(_)
                | Error::SkippedSeries { .. }
        )
    }
}
