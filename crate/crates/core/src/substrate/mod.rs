//! The differentiable-computation layer: dense tensors, a reverse-mode tape,
//! parameter stores, layers, Adam, and a finite-difference verifier.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use checkpoint::{load_arrays, store_to_arrays, NamedArray};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Unary, Var};
pub use nn::{causal_mask, sinusoidal_positions, LayerCache, LayerNorm, Linear, Mask, MultiHeadAttention, TransformerLayer, TransformerStack};
pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// The closed set of differentiable primitives a model may be built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    EmbeddingLookup,
    Affine,
    WindowedConv,
    Rectifier,
    Bilinear,
    MaskedSoftmax,
    MultiHeadAttention,
    TransformerLayer,
    CrossEntropy,
    RowScale,
}

impl Primitive {
    pub const ALL: [Primitive; 10] = [
        Primitive::EmbeddingLookup,
        Primitive::Affine,
        Primitive::WindowedConv,
        Primitive::Rectifier,
        Primitive::Bilinear,
        Primitive::MaskedSoftmax,
        Primitive::MultiHeadAttention,
        Primitive::TransformerLayer,
        Primitive::CrossEntropy,
        Primitive::RowScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::EmbeddingLookup => "embedding",
            Primitive::Affine => "affine",
            Primitive::WindowedConv => "conv1d",
            Primitive::Rectifier => "relu",
            Primitive::Bilinear => "bilinear",
            Primitive::MaskedSoftmax => "softmax",
            Primitive::MultiHeadAttention => "attention",
            Primitive::TransformerLayer => "transformer",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::RowScale => "row_scale",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = SubstrateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SubstrateError::UnsupportedPrimitive(s.to_string()))
    }
}

pub fn required_primitives() -> &'static [Primitive] {
    &Primitive::ALL
}

/// Resolves a list of primitive names, failing on the first unknown one.
pub fn resolve_primitives<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Vec<Primitive>, SubstrateError> {
    names.into_iter().map(str::parse).collect()
}
