//! Scalar abstraction over the floating-point element type.
//!
//! All numeric kernels in this crate are generic over [`Scalar`], so the same
//! code runs in `f32` (the default for simulation runs, where throughput
//! matters) and `f64` (used by the finite-difference and property suites,
//! where round-off would otherwise drown the signal).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors, parameters, and gradients.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum<Self>
    + Send
    + Sync
    + Display
    + Debug
    + Default
    + 'static
{
    /// Type tag stored in checkpoint headers ("f32" or "f64").
    const DTYPE: &'static str;
    /// Width of one element in bytes.
    const BYTES: usize;

    /// Append the little-endian byte representation to `buf` (bit-exact).
    fn write_le(self, buf: &mut Vec<u8>);
    /// Reconstruct from exactly [`Scalar::BYTES`] little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 not representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("expected 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("expected 8 bytes"))
    }
}
