use std::io;

use cmfn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("text of length {len} exceeds the maximum of {max} symbols")]
    TextTooLong { len: usize, max: usize },
    #[error("character {0:?} is not in the charset")]
    UnsupportedChar(char),
}

/// Problems with on-disk checkpoints and dataset files.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (this build reads version {supported}); regenerate the file with this build")]
    Version { found: u32, supported: u32 },
    #[error("file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("charset mismatch: file has {found:?}, expected {expected:?}")]
    Charset { found: String, expected: String },
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CmfnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CmfnError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}

pub type Result<T, E = CmfnError> = std::result::Result<T, E>;

/// Lets model code run inside closures that speak [`TensorError`], such as
/// the finite-difference checker.
impl From<CmfnError> for TensorError {
    fn from(e: CmfnError) -> Self {
        match e {
            CmfnError::Tensor(inner) => inner,
            other => TensorError::Numeric(other.to_string()),
        }
    }
}
