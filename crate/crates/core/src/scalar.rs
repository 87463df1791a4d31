//! Floating-point scalar abstraction: the numeric kernels are generic over
//! `Scalar`, concrete aliases at the crate root pin `f64` for everyday use.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

/// Floating point scalar: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + Debug
    + Display
    + FromStr
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossless-enough constant conversion; panics only for non-finite inputs
/// that f32/f64 cannot represent, which never occurs for literals.
#[inline]
pub fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 constant convertible to scalar")
}

/// `ln Γ(x)`, evaluated in f64 and cast back.
#[inline]
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    cast(statrs::function::gamma::ln_gamma(x.to_f64().unwrap()))
}

/// Standard normal CDF, evaluated in f64 and cast back.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    use statrs::distribution::ContinuousCDF;
    let std_normal = statrs::distribution::Normal::standard();
    cast(std_normal.cdf(x.to_f64().unwrap()))
}
