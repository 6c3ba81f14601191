//! Graph representation and the exact FP32 reference executor.

mod exec;
mod graph;
pub mod io;
mod tensor;

pub use exec::{
    conv2d, execute_all, execute_reference, layer_norm, matmul, moments, softmax, softmax_denominators,
    softmax_shifted, TensorMap,
};
pub(crate) use exec::needed_nodes;
pub(crate) use graph::conv_output_hw;
pub use graph::{Diagnostic, DiagnosticKind, Graph, GraphBuilder, GraphInput, Node, NodeKind};
pub use tensor::{axis_split, is_permutation, normalize_axis, permutation_map, permuted_shape, strides, Tensor};
