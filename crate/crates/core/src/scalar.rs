use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar type the numeric core is generic over.
///
/// `f32` is the default for training and inference; `f64` is used where
/// finite-difference comparisons need the extra precision.
pub trait Scalar: Float + Debug + Display + Send + Sync + 'static {
    /// Checkpoint dtype tag (0 = f32, 1 = f64).
    const DTYPE: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Shorthand for converting literals inside generic code.
#[inline]
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_f64(x)
}
