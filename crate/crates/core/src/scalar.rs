//! Numeric abstraction for rate arithmetic.
//!
//! The control math (SafeUtil updates, token sizing, remote shares) is written
//! once over [`Scalar`] and instantiated with integer bytes/s inside the
//! simulator, `f64` for exploratory use, and exact rationals in tests.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::Num;

/// A rate or size value the controller can compute with.
pub trait Scalar: Num + Copy + PartialOrd + Debug {
    fn from_u64(v: u64) -> Self;

    /// Lossy conversion used only for reporting and nanosecond rounding.
    fn to_f64(self) -> f64;

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if a <= b {
            a
        } else {
            b
        }
    }
}

impl Scalar for u64 {
    fn from_u64(v: u64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for u128 {
    fn from_u64(v: u64) -> Self {
        v as u128
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_u64(v: u64) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_u64(v: u64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for Ratio<i128> {
    fn from_u64(v: u64) -> Self {
        Ratio::from_integer(v as i128)
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

impl Scalar for Ratio<u128> {
    fn from_u64(v: u64) -> Self {
        Ratio::from_integer(v as u128)
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}
