//! Scalar abstraction so the whole stack runs in either f32 or f64.
//!
//! Training and synthesis default to [`crate::Real`] (f32); gradient-check
//! tests instantiate everything with f64.

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}
