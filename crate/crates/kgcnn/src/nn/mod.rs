//! Minimal reverse-mode differentiable network engine.
//!
//! Supports 3x3 same-padded convolution (cross-correlation convention),
//! ReLU, batch normalization, 2x mean pooling, fully-connected layers,
//! residual blocks, external-channel concatenation, a Frobenius loss,
//! and Adam. Everything is 64-bit and checked against central finite
//! differences in the test suite.

mod adam;
#[cfg(test)]
mod tests;
mod checkpoint;
mod engine;
mod layers;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use engine::{
    backward, forward, frobenius_loss, init_state, param_count, Gradients, LayerSpec, LayerState,
    Mode, NetState, ParamTensor, Tape,
};
pub use tensor::Tensor4;
