//! Floating-point element types accepted by tensors and kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of a [`Tensor`](crate::Tensor): `f32` for training, `f64`
/// for gradient checks and loss identities.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = a·b (+ c)` on strided views: `a` is `m×k`, `b` is `k×n`, `c` is
    /// `m×n`, each given as `(row_stride, col_stride)` into its buffer.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        c: &mut [Self],
        sc: (usize, usize),
        accumulate: bool,
    );

    /// Row-major `c = a·b (+ c)` where `a` is `m×k` and `b` is `k×n`.
    ///
    /// `a_t`/`b_t` mean the stored buffer is the transpose (`k×m` / `n×k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k, "gemm: lhs buffer too short");
        assert!(b.len() >= k * n, "gemm: rhs buffer too short");
        assert!(c.len() >= m * n, "gemm: output buffer too short");
        Self::gemm_strided(m, k, n, a, strides(m, k, a_t), b, strides(k, n, b_t), c, (n, 1), accumulate);
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    // Strides of the logical (rows × cols) matrix inside its row-major buffer.
    if transposed {
        (1, rows)
    } else {
        (cols, 1)
    }
}

/// One past the largest offset a strided `rows × cols` view touches.
fn extent(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                c: &mut [Self],
                sc: (usize, usize),
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        for i in 0..m {
                            for j in 0..n {
                                c[i * sc.0 + j * sc.1] = 0.0;
                            }
                        }
                    }
                    return;
                }
                assert!(a.len() >= extent(m, k, sa), "gemm: lhs buffer too short");
                assert!(b.len() >= extent(k, n, sb), "gemm: rhs buffer too short");
                assert!(c.len() >= extent(m, n, sc), "gemm: output buffer too short");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every offset the views touch was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
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
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_triple_loop_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                f64::gemm(m, k, n, aa, a_t, bb, b_t, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(1, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c[0], 21.0);
        f32::gemm(1, 2, 1, &a, false, &b, false, &mut c, false);
        assert_eq!(c[0], 11.0);
    }

    #[test]
    fn strided_output_block() {
        // 2x2 product written into the right half of a 2x4 buffer.
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [9.0f64; 8];
        f64::gemm_strided(2, 2, 2, &a, (2, 1), &b, (2, 1), &mut c[2..], (4, 1), false);
        assert_eq!(c, [9.0, 9.0, 1.0, 2.0, 9.0, 9.0, 3.0, 4.0]);
    }
}
