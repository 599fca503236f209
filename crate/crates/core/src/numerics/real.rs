use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the whole stack is generic over.
///
/// Models train in `f32`; gradient verification instantiates the exact same
/// code at `f64` so finite differences have enough headroom to resolve the
/// analytic gradient.
pub trait Real:
    num_traits::Float + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
