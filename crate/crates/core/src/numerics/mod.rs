//! Dense tensors with reverse-mode differentiation, Adam with an inverse
//! square-root schedule, and the binary parameter checkpoint format.

mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{inverse_sqrt_lr, OptimizerState};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    NonFinite(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
