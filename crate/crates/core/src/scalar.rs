//! Scalar abstraction the numeric kernels are generic over.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign, NumCast};

/// Floating-point scalar type for tensor data and attention state.
///
/// `f32` is the working precision of the engine; `f64` backs the dense
/// reference oracle. The two helper methods exist so kernels can mix
/// literal constants and accumulator widening without sprinkling
/// `NumCast::from(..).unwrap()` everywhere.
pub trait Scalar:
    Float + NumAssign + NumCast + Debug + Display + Send + Sync + 'static
{
    /// Converts from `f64`, narrowing if necessary.
    #[inline]
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 representable in scalar type")
    }

    /// Widens to `f64`.
    #[inline]
    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar widens to f64")
    }
}

impl<T> Scalar for T where
    T: Float + NumAssign + NumCast + Debug + Display + Send + Sync + 'static
{
}

/// Dot product with four independent accumulators so the optimizer can keep
/// the loop in vector registers.
#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let mut acc = [S::zero(); 4];
    for i in 0..chunks {
        let base = i * 4;
        acc[0] += a[base] * b[base];
        acc[1] += a[base + 1] * b[base + 1];
        acc[2] += a[base + 2] * b[base + 2];
        acc[3] += a[base + 3] * b[base + 3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares<S: Scalar>(values: &[S]) -> S {
        let mut acc = S::zero();
        for &v in values {
            acc += v * v;
        }
        acc
    }

    #[test]
    fn generic_kernel_works_for_both_widths() {
        let a = [1.0f32, 2.0, 3.0];
        let b = [1.0f64, 2.0, 3.0];
        assert_eq!(sum_of_squares(&a), 14.0f32);
        assert_eq!(sum_of_squares(&b), 14.0f64);
    }

    #[test]
    fn conversions_round_trip_for_exact_values() {
        assert_eq!(f32::from_f64(0.5), 0.5f32);
        assert_eq!(Scalar::to_f64(0.5f32), 0.5f64);
        assert_eq!(f64::from_f64(-3.25), -3.25f64);
    }

    #[test]
    fn infinities_survive_conversion() {
        assert_eq!(f32::from_f64(f64::NEG_INFINITY), f32::NEG_INFINITY);
        assert_eq!(Scalar::to_f64(f32::INFINITY), f64::INFINITY);
    }

    #[test]
    fn dot_matches_naive_for_odd_lengths() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..13).map(|i| 13.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
