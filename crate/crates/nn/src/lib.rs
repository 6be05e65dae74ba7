//! Minimal dense-tensor reverse-mode autodiff for small conv/dense networks.
//!
//! * [`Tensor`]: row-major `f64` arrays.
//! * [`Tape`]: records a forward pass; replays it numerically
//!   ([`Tape::backward`]) or as differentiable nodes ([`Tape::grad_graph`]).
//! * [`Network`]: a validated [`LayerSpec`] stack bound to a [`ParamStore`].
//! * [`Adam`]: bias-corrected Adam over a subset of a store.
//! * [`checkpoint`]: versioned binary container for parameter values.

pub mod checkpoint;
mod network;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{DType, NamedTensor};
pub use network::{Activation, LayerKind, LayerSpec, Network, LEAKY_SLOPE};
pub use params::{Adam, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    conv2d, conv2d_input_grad, conv2d_weight_grad, conv_transpose2d, matmul, ConvGeom, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{network} layer {layer} ({kind}): expected per-sample input {expected:?}, got {got:?}")]
    ShapeMismatch {
        network: String,
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward called before any forward pass touched a parameter")]
    NoGraph,
    #[error("second-order gradients are not supported through {0}")]
    NoDoubleBackward(&'static str),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
