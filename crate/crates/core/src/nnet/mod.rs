//! A small hand-differentiated BEV segmentation network.
//!
//! Everything here is generic over [`Scalar`](crate::Scalar): training runs
//! in `f32`, gradient checks in `f64`.

mod checkpoint;
mod conv;
mod dysample;
mod net;
mod sgd;
mod tensor;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, read_checkpoint, write_checkpoint};
pub use conv::{relu_backward, relu_forward, Conv2d};
pub use dysample::{bilinear_upsample, DySample, DySampleCache};
pub use net::{ArchSpec, Layer, LayerSpec, NetTrace, SegNet};
pub use sgd::SgdState;
pub use tensor::Tensor3;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad architecture descriptor: {0}")]
    Arch(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnetError>;
