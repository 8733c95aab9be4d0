//! Small CPU tensor library with a define-by-run reverse-mode tape.
//!
//! Covers exactly the layers the adaptive models, the perturbation generator
//! and the discriminator need: convolutions (plain and transposed), dense
//! layers, batch normalization, pooling, pointwise activations and a few fused
//! per-sample reductions used by perturbation budgets and losses.

mod error;
pub mod graph;
pub mod kernels;
pub mod params;
mod tensor;

pub use error::{Error, Result};
pub use graph::{sigmoid, softmax_rows, softplus, BatchStats, Gradients, Graph, PNorm, Var};
pub use params::{kaiming_uniform, uniform, Adam, Bound, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
