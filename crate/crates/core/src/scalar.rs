//! Floating-point scalar abstraction shared by every numeric module.
//!
//! Training runs in `f32`; gradient checks and exact formula tests run in
//! `f64`. Everything that touches maps, losses or network tensors is generic
//! over [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type usable throughout the crate: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` on strided
    /// row-major views. `A` is `m×k`, `B` is `k×n`, `C` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Lossy conversion from `f64` (used for literal constants).
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides unsupported");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "gemm operand too short: need {} elements, have {len}", last + 1);
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the extents of all three operands were checked above
                // and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, (k as isize, 1), &b, (n as isize, 1), 0.0, &mut c, (n as isize, 1));
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_view() {
        // A stored as k×m, read transposed.
        let (m, k, n) = (2, 3, 2);
        let at = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f32; 4];
        f32::gemm(m, k, n, 1.0, &at, (1, m as isize), &b, (n as isize, 1), 0.0, &mut c, (n as isize, 1));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }
}
