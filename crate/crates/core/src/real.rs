//! Scalar abstraction shared by every numeric module.
//!
//! Production code runs on `f32`. The same generic code is instantiated on
//! `f64` by the gradient checks so central differences are not swamped by
//! single-precision rounding.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn c(v: f64) -> Self;

    /// Round half to even (banker's rounding).
    fn round_even(self) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn round_even(self) -> Self {
        self.round_ties_even()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(v: f64) -> Self {
        v
    }

    #[inline]
    fn round_even(self) -> Self {
        self.round_ties_even()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_even() {
        assert_eq!(2.5f32.round_even(), 2.0);
        assert_eq!(3.5f32.round_even(), 4.0);
        assert_eq!((-0.5f64).round_even(), -0.0);
        assert_eq!(3.7f64.round_even(), 4.0);
    }
}
