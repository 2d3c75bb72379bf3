//! Dense double-precision tensors with a reverse-mode tape.
//!
//! Activations use the layout `[batch, channels, time, vertices]`. Every
//! operation on [`Tape`] records what it needs for an exact analytic
//! backward pass; [`Tape::backward`] walks the tape in reverse.

mod adam;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use params::ParamStore;
pub use tape::{BatchStats, Gradients, NormMode, Tape, Var, BN_EPSILON};
pub use tensor::Tensor;
