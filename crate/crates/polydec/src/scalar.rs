//! Scalar abstraction: the whole crate is generic over `f32`/`f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar the library works over.
///
/// `RealField` supplies the linear-algebra surface (via nalgebra), while the
/// num-traits conversions cover counts and literals. The sampler method keeps
/// `rand_distr` bounds out of every generic signature.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Draw one standard-normal sample.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Convert an `f64` literal into the working scalar type.
pub(crate) fn fr<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Convert a count into the working scalar type.
pub(crate) fn fu<T: Scalar>(k: usize) -> T {
    T::from_usize(k).expect("count representable in scalar type")
}

/// Machine epsilon of the working scalar type.
pub(crate) fn eps<T: Scalar>() -> T {
    T::default_epsilon()
}
