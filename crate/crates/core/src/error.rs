use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice shape: {0}")]
    InvalidShape(String),

    #[error("block out of range on axis {axis}: ({lo}, {hi}] not inside (0, {extent}]")]
    BlockOutOfRange {
        axis: usize,
        lo: usize,
        hi: usize,
        extent: usize,
    },

    #[error("invalid block: {0}")]
    InvalidBlock(String),

    #[error("pair prefix tensor needs {required} bytes, over the {cap} byte memory cap")]
    MemoryCap { required: u64, cap: u64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}", fmt_data(.row, .message))]
    Data { row: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_data(row: &Option<usize>, message: &str) -> String {
    match row {
        Some(r) => format!("data error at row {r}: {message}"),
        None => format!("data error: {message}"),
    }
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(row: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data {
            row,
            message: msg.into(),
        }
    }

    /// True for errors caused by the caller's parameters rather than by input data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidShape(_) | Error::InvalidBlock(_) | Error::MemoryCap { .. }
        )
    }
}
