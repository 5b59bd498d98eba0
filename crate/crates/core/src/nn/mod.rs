//! A small reverse-mode tensor engine with the layers the model zoo uses.

mod checkpoint;
mod float;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use float::{gemm, Float};
pub use layers::{
    apply_stat_updates, BatchNorm, Conv2d, Embedding, Graph, Gru, Linear, Lstm, Mode, StatUpdate, BN_EPS,
    BN_MOMENTUM,
};
pub use optim::Adam;
pub use params::{Buffer, BufferId, Param, ParamId, ParamStore};
pub use tape::{conv_out_len, ConvGeom, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch normalization in train mode needs at least two rows per channel")]
    BatchTooSmall,
    #[error("sequence length {length} exceeds padded width {width}")]
    SequenceTooLong { length: usize, width: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type NnResult<T> = Result<T, NnError>;
