//! Tensor arithmetic, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{GradBuffer, ParamSet};
pub use tape::{
    log_softmax_at, softmax_in_place, Gradients, Tape, Var, COSINE_NORM_FLOOR, LAYER_NORM_EPS,
};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("backward needs a scalar loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("missing gradient for {0}")]
    MissingGrad(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("empty sequence")]
    EmptySeq,
}
