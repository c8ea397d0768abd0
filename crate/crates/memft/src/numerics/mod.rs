//! Numerics: tensors, the autodiff tape, and gradient checking.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, report_from_pairs, GradCheckReport};
pub use tape::{ParamId, ParamStore, Parameter, Tape, ValueId};
pub use tensor::{Dtype, Scalar, Tensor};
