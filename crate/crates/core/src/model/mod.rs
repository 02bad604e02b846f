//! Character-level encoder-decoder transformer, trained from scratch with
//! hand-written backward passes.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod forward;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{count_params, ModelConfig};
pub use decode::{decode_greedy, decode_many, output_mask, Decoded};
pub use forward::{batch_loss, cross_entropy, Noise, Tape};
pub use optim::{clip_grad_norm, cosine_lr, grad_norm, Adam, AdamConfig};
pub use params::{init_model, Params, Tensor, Transformer};
pub use tensor::{Mat, Scalar};
pub use train::{dev_accuracy, dev_macro, train, BatchSource, DevSet, LogRow, TrainConfig, TrainLog, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{side} length {len} exceeds the maximum of {max}")]
    LengthExceeded { side: &'static str, len: usize, max: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("vocabulary digest mismatch: checkpoint has {found}, vocabulary is {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
