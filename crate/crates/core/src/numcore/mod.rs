//! Dense tensors, a define-by-run autodiff tape, and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use graph::{Grads, Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::{gelu_slice, layer_norm_row, log_sigmoid, log_softmax_rows, softmax_rows};
pub(crate) use tensor::{gemm, Layout};
