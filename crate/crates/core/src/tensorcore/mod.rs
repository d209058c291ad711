//! Deterministic reverse-mode differentiation and the layer primitives the
//! ranking models are built from.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare, grad_check, numeric_gradients, relative_error, GradCheckEntry,
    GradCheckReport, NamedGrads, DEFAULT_STEP,
};
pub use graph::{Graph, NodeId};
pub use layers::{Activation, GruCell, Linear, MlpBlock};
pub use params::{derive_seed, Init, Param, Parameterized};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss does not depend on any trainable tensor")]
    Detached,
}
