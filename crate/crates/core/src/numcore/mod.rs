//! Tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything downstream — layers, the fusion transformer, losses, the
//! trainer — is expressed through the primitive catalog in [`ops`], so a
//! finite-difference check of each primitive transitively validates every
//! model gradient.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, InputReport};
pub use ops::{apply_primitive, Attrs};
pub use rng::Rng;
pub use tape::{backward, is_grad_enabled, no_grad, reset_tape, tape_len, Gradients};
pub use tensor::{float_mode, set_float_mode, with_float_mode, FloatMode, Tensor};

/// Errors surfaced by tensor primitives and the tape.
#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{prim}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        prim: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{prim}: {msg}")]
    Invalid { prim: &'static str, msg: String },
    #[error("unknown primitive id `{0}`")]
    UnknownPrimitive(String),
    #[error("buffer of length {len} does not match shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not attached to the active tape")]
    DetachedLoss,
}
