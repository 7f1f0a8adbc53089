use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants map onto the distinct failure classes the CLI turns into
/// exit codes: configuration problems, data/parse problems, stale layer
/// state, and training divergence.
#[derive(Debug, Error)]
pub enum CpacError {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is out of range or otherwise invalid.
    #[error("argument error: {0}")]
    Argument(String),

    /// A layer was used out of order (e.g. backward without a fresh forward).
    #[error("state error: {0}")]
    State(String),

    /// A network or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A data file failed to load or parse. Always names the offending file.
    #[error("data error in {file}: {reason}")]
    Data { file: String, reason: String },

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at batch {batch}")]
    Divergence { batch: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CpacError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CpacError::Shape(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        CpacError::Argument(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        CpacError::State(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CpacError::Config(msg.into())
    }

    pub fn data(file: impl Into<String>, reason: impl Into<String>) -> Self {
        CpacError::Data {
            file: file.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CpacError>;
