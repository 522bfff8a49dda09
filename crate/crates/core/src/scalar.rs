//! Floating-point abstraction shared by the encoder and the metric code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real scalar used for tensor math and metric aggregation.
///
/// Implemented for `f32` (training default) and `f64` (gradient checks,
/// metric oracles).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for constants and hyperparameters.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Bytes of the little-endian `f32` encoding used by checkpoints.
    fn to_le_f32(self) -> [u8; 4] {
        (self.to_f64_lossy() as f32).to_le_bytes()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
