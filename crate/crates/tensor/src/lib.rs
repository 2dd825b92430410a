//! Dense tensors and a reverse-mode autodiff tape, generic over `f32` (training)
//! and `f64` (gradient checking).

mod conv;
mod error;
pub mod gradcheck;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use conv::{ConvGeometry, Padding};
pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use param::{Bound, ParamId, ParamKind, ParamSet, Parameter};
pub use scalar::{DType, Scalar};
pub use tape::{Activation, BatchStats, Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
