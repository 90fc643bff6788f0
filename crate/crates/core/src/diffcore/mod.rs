//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape recorded while the forward pass runs. Each method
//! on it evaluates one primitive immediately and remembers what it needs
//! for the reverse sweep. Primitives with bespoke gradient rules (the
//! quantizer's surrogate, the normalized reconstruction loss) plug in via
//! [`CustomOp`].
//!
//! Parameters live in a [`ParamStore`] and are bound to a graph through a
//! [`Session`], which decides per parameter whether gradients are recorded.
//! Separate sessions over the same store can run concurrently.

mod graph;
mod params;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var, ZERO_ROW};
pub use params::{ParamEntry, ParamId, ParamStore, Session};
pub use tensor::Tensor;

/// Epsilon used by every layer normalization in the networks.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        DiffError::Shape { op, detail }
    }
}
