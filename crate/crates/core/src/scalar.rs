//! Numeric traits the rest of the crate is written against.
//!
//! [`Scalar`] is the weak bound: field arithmetic, energies, simplex
//! projection and hardening only need a signed ordered field, so they also
//! run on exact rationals. [`Real`] adds the transcendental functions and the
//! threading bounds the iterative solvers need.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, NumAssign, Signed, ToPrimitive};

/// Ordered signed field used by the discrete calculus and the energies.
pub trait Scalar:
    Copy + Debug + Display + PartialOrd + Signed + NumAssign + FromPrimitive + ToPrimitive + Sum
{
    /// Tolerance for user-facing simplex feasibility checks.
    fn feasibility_tol() -> Self;

    /// Tolerance used inside projections; zero for exact types.
    fn projection_tol() -> Self;

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

/// Floating-point scalar for the iterative solvers and the driver.
pub trait Real: Scalar + Float + Send + Sync + 'static {}

impl Scalar for f64 {
    fn feasibility_tol() -> Self {
        1e-10
    }
    fn projection_tol() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    fn feasibility_tol() -> Self {
        1e-5
    }
    fn projection_tol() -> Self {
        1e-6
    }
}

impl Real for f64 {}
impl Real for f32 {}

impl Scalar for Ratio<i64> {
    fn feasibility_tol() -> Self {
        Ratio::from_integer(0)
    }
    fn projection_tol() -> Self {
        Ratio::from_integer(0)
    }
}

impl Scalar for Ratio<i128> {
    fn feasibility_tol() -> Self {
        Ratio::from_integer(0)
    }
    fn projection_tol() -> Self {
        Ratio::from_integer(0)
    }
}
