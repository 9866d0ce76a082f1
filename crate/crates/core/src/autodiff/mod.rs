//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod adamw;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{finite_diff_check, finite_diff_check_params, GradCheckReport};
pub use params::{Init, ParamDecl, ParamGroup, ParamId, ParamStore, Parameter, Registry};
pub use tape::{OpAttrs, OpKind, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("backward root must hold exactly one element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value {value} at {location}")]
    NonFinite { value: f64, location: String },
    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("{0}")]
    Invalid(String),
}
