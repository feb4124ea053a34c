//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! All math is written against [`Scalar`]; `f64` is the working precision for
//! the CLI and the certificate suite, `f32` compiles and runs but the default
//! tolerances (1e-10 and friends) are below its resolution.

use std::fmt::{Debug, Display};

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar: f32 or f64.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Machine epsilon of the scalar type, as `f64`.
#[inline]
pub fn epsilon<T: Scalar>() -> f64 {
    to_f64(T::default_epsilon())
}

/// Converts a count into the working scalar.
#[inline]
pub fn from_usize<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count representable in scalar type")
}

#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `ln Σ_i w_i exp(x_i)` with max-subtraction; weights must be positive.
pub fn log_sum_exp_weighted<T: Scalar>(x: &[T], w: &[T]) -> T {
    debug_assert_eq!(x.len(), w.len());
    let m = x.iter().skip(1).fold(x[0], |a, &b| a.max(b));
    let s = x
        .iter()
        .zip(w)
        .fold(T::zero(), |acc, (&xi, &wi)| acc + wi * (xi - m).exp());
    m + s.ln()
}

/// Sup norm of a matrix.
pub fn sup_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |a, &b| a.max(b.abs()))
}

/// Sup norm of a vector.
pub fn sup_norm_vec<T: Scalar>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |a, &b| a.max(b.abs()))
}

/// `h(δ) = δ e^δ − e^δ + 1 ≥ 0`, evaluated without cancellation near zero.
///
/// `KL(p|q) = Σ_a q(a) h(ln p(a) − ln q(a))` for normalised p, q.
pub fn kl_kernel<T: Scalar>(d: T) -> T {
    if d.abs() < lit(1e-3) {
        // Σ_{k≥2} (k−1)/k! δ^k
        let d2 = d * d;
        d2 * (lit::<T>(0.5)
            + d * (lit::<T>(1.0 / 3.0) + d * (lit::<T>(0.125) + d * lit::<T>(1.0 / 30.0))))
    } else {
        let e = d.exp();
        d * e - e + T::one()
    }
}

/// Flattens an `S×A` table into an `S·A` column, row-major in `(s, a)`.
pub fn flatten_sa<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    let (ns, na) = m.shape();
    DVector::from_fn(ns * na, |i, _| m[(i / na, i % na)])
}

/// Inverse of [`flatten_sa`].
pub fn unflatten_sa<T: Scalar>(v: &DVector<T>, ns: usize, na: usize) -> DMatrix<T> {
    DMatrix::from_fn(ns, na, |s, a| v[s * na + a])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let x = [0.3_f64, -1.2, 2.5];
        let w = [0.2, 0.5, 0.3];
        let direct: f64 = x.iter().zip(&w).map(|(a, b)| b * a.exp()).sum::<f64>().ln();
        let got = log_sum_exp_weighted(&x, &w);
        assert!((got - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_arguments() {
        let x = [800.0_f64, 799.0];
        let got = log_sum_exp_weighted(&x, &[0.5, 0.5]);
        let expected = 800.0 + (0.5 + 0.5 * (-1.0_f64).exp()).ln();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_kernel_series_and_closed_form_agree_at_switch() {
        for &d in &[9.99e-4_f64, -9.99e-4, 1.01e-3, -1.01e-3] {
            let closed = d * d.exp() - d.exp() + 1.0;
            assert!((kl_kernel(d) - closed).abs() < 1e-15);
        }
        assert!(kl_kernel(1e-9_f64) > 0.0);
        assert!((kl_kernel(1e-9_f64) - 0.5e-18).abs() < 1e-27);
    }

    #[test]
    fn flatten_roundtrip_f32() {
        let m = DMatrix::<f32>::from_fn(2, 3, |i, j| (i * 3 + j) as f32);
        let v = flatten_sa(&m);
        assert_eq!(v[4], 4.0);
        assert_eq!(unflatten_sa(&v, 2, 3), m);
    }
}
