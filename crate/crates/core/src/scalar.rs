//! Scalar abstraction for the numeric core.
//!
//! All model, probe, and analysis math is generic over [`Scalar`] so the same
//! code runs in `f32` (pipeline default, matches the on-disk cache payload)
//! and `f64` (gradient checks and metric oracles). Concrete aliases live at
//! the crate root.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only for types that cannot
    /// represent ordinary finite constants.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must convert")
    }

    /// Widening conversion used by metric reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>(x: f64) -> f64 {
        T::from_f64_lossy(x).to_f64_lossy()
    }

    #[test]
    fn conversions_roundtrip() {
        assert_eq!(roundtrip::<f64>(0.51), 0.51);
        assert_eq!(roundtrip::<f32>(0.5), 0.5);
        assert!((roundtrip::<f32>(0.01) - 0.01).abs() < 1e-9);
    }
}
