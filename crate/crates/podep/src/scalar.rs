use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Floating-point element type for tensors, parameters, and losses.
///
/// Implemented for `f32` and `f64` through the blanket impl. Constants are
/// converted with `T::from(x).unwrap()` (via `NumCast`), so generic code never
/// hardcodes a precision.
pub trait Scalar: Float + NumAssignOps + Debug + Display + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + NumAssignOps + Debug + Display + Send + Sync + 'static {}
