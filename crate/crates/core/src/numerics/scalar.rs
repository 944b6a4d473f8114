use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar usable as tensor storage.
///
/// Reductions convert to `f64` through [`Scalar::to_f64`] and accumulate there
/// regardless of the storage type, so `f32` models keep 64-bit sums.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Copy + Default + Debug + Display + Send + Sync + 'static
{
    /// Short type tag written into checkpoints and manifests.
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Appends the little-endian bit pattern; used for parameter hashing.
    fn extend_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}
