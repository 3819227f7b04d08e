//! Differentiable image operators on batch-channel-row-col tensors.
//!
//! Every operator evaluates its forward value eagerly and records a
//! reverse rule on a [`Graph`]; [`Graph::backward`] replays the tape.

mod conv;
pub mod gradcheck;
mod graph;
mod pointwise;
mod pool;
mod sample;
mod shape;
mod tensor;

pub use conv::{conv2d_forward, ConvCfg};
pub use graph::{Backward, DualTensor, Gradients, Graph, Var};
pub(crate) use pointwise::sigmoid;
#[cfg(test)]
pub(crate) use pointwise::clamp_grad;
pub use pool::avg_pool_forward;
pub use sample::{bilinear_sample_forward, Taps};
pub use shape::resize_bilinear_forward;
pub use tensor::Tensor4;
