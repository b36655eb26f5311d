//! Dense tensors, dilated 1-D convolution, reverse-mode gradients and Adam.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, ParamStore};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{conv1d, Real, Tensor};
