//! Dense f64 tensor core and a toy layered model whose backward pass is
//! split into an input-gradient phase (B) and a weight-update phase (W).
//!
//! Block: optional single-head attention sublayer, then
//! `x + fc2(gelu(fc1(x)))`, both with residual adds. Block weights are frozen;
//! only LoRA adapters and the classifier head train.

mod checkpoint;
mod model;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use model::{
    train_step, AdapterContext, AttnWeights, BackwardContexts, BlockWeights, FrozenPrefix, Head, HeadContext,
    HeadOutput, ParamId, ToyConfig, ToyModel,
};
pub use tensor::Tensor2D;
