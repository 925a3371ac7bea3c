//! A small CPU neural-network engine and the convolutional autoencoder
//! built on it.

mod layers;
mod model;
mod tensor;
mod train;
mod weights;

use thiserror::Error;

pub use layers::{Conv2d, ConvTranspose2d, Dense, Layer};
pub use model::{Cae, Trace, ARCHITECTURE};
pub use tensor::{Scalar, Tensor};
pub use train::{
    loss_csv, mse_loss, reconstruct, train, train_on_pixels, train_step, Adam, TrainConfig, Trained,
};
pub use weights::{
    decode_weights, encode_weights, load_weights, save_weights, ParamSpec, WeightHeader,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite activation after layer {layer} ({name})")]
    NonFinite { layer: usize, name: &'static str },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("training set contains an abnormal sample at index {0}")]
    AbnormalTrainingSample(usize),
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error(
        "weight blob checksum mismatch (header says {expected_len} bytes, found {actual_len})"
    )]
    Checksum {
        expected_len: usize,
        actual_len: usize,
    },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("i/o error: {0}")]
    Io(String),
}
