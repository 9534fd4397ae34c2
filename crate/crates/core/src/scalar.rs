//! Scalar abstractions.
//!
//! [`Field`] is the minimal bound for code that only needs exact ring/field
//! arithmetic (path construction, Euler integration, squared errors) and is
//! satisfied by exact rationals. [`Real`] adds the transcendental functions
//! needed by the network and the autodiff tape.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, NumAssign, Signed, ToPrimitive};

/// Exact rational scalar used where arithmetic must not round.
pub type Exact = BigRational;

pub trait Field:
    Clone + PartialOrd + Debug + Num + Signed + FromPrimitive + Send + Sync + 'static
{
    /// Converts an `f64` into this scalar. Panics only for non-finite input.
    fn from_f64_exact(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts into every Field")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts into every Field")
    }
}

impl<T> Field for T where
    T: Clone + PartialOrd + Debug + Num + Signed + FromPrimitive + Send + Sync + 'static
{
}

pub trait Real: Field + Float + NumAssign + Copy + Display + Default + Sum + ToPrimitive {
    fn erf(self) -> Self;

    /// Literal conversion.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Exact rational from a finite `f64` (every finite binary float is a dyadic rational).
pub fn exact_from_f64(x: f64) -> Exact {
    BigRational::from_float(x).expect("finite")
}

pub fn exact_int(n: i64) -> Exact {
    BigRational::from_integer(BigInt::from(n))
}
