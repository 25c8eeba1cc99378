//! Floating-point abstraction shared by every numeric module.
//!
//! Training runs in `f32` by default; gradient checks and the bit-exact
//! determinism runs use `f64`. Everything numeric in this crate is written
//! once against [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `BYTES` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:literal) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bit_exact() {
        for x in [0.1f64, -3.5e-300, f64::MAX, 1.0 / 3.0] {
            let mut buf = Vec::new();
            x.write_le(&mut buf);
            assert_eq!(f64::read_le(&buf).to_bits(), x.to_bits());
        }
        let mut buf = Vec::new();
        0.1f32.write_le(&mut buf);
        assert_eq!(buf.len(), f32::BYTES);
        assert_eq!(f32::read_le(&buf).to_bits(), 0.1f32.to_bits());
    }
}
