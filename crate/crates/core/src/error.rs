use thiserror::Error;

use crate::codec::CodecError;
use crate::container::ContainerError;
use crate::tensor::TensorError;
use crate::weights::WeightError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("frame {index}: size {got_w}x{got_h} differs from {want_w}x{want_h}")]
    FrameSize {
        index: usize,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("image: {0}")]
    Image(String),
    #[error("{0}")]
    Malformed(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 for malformed input, 3 for configuration or
    /// weight mismatches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Weights(WeightError::Io(_)) => 2,
            Error::Weights(_) | Error::Config(_) | Error::Tensor(_) => 3,
            _ => 2,
        }
    }
}
