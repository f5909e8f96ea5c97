//! Floating-point scalar abstraction shared by the tensor core, the pipeline
//! and the adaptation modules.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` and `f64`. Gradient checks and the experiment harness
/// run in `f64`; `f32` is supported for inference-style use.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Copy + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    fn of(x: f64) -> Self;

    /// Widens to `f64` (exact for both supported types).
    fn as_f64(self) -> f64;

    /// `C = A B + beta C` for row/column-strided matrices, `A` being `m x k`
    /// and `B` `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: &mut [Self], c_row: usize);
}

/// Read-only strided matrix view for [`Scalar::gemm`].
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Dense row-major matrix with `cols` columns.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// Transpose of a dense row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols }
    }
}

fn check_extent<T>(m: &Mat<'_, T>, rows: usize, cols: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * m.row_stride + (cols - 1) * m.col_stride;
        assert!(last < m.data.len(), "gemm operand out of bounds");
    }
}

macro_rules! impl_gemm {
    ($t:ty, $f:ident) => {
        fn gemm(m: usize, k: usize, n: usize, a: Mat<'_, $t>, b: Mat<'_, $t>, beta: $t, c: &mut [$t], c_row: usize) {
            check_extent(&a, m, k);
            check_extent(&b, k, n);
            if m > 0 && n > 0 {
                assert!((m - 1) * c_row + n <= c.len(), "gemm output out of bounds");
            }
            // SAFETY: every operand extent was bounds-checked above and `c`
            // is uniquely borrowed.
            unsafe {
                matrixmultiply::$f(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b.data.as_ptr(),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    beta,
                    c.as_mut_ptr(),
                    c_row as isize,
                    1,
                );
            }
        }
    };
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    impl_gemm!(f32, sgemm);
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    impl_gemm!(f64, dgemm);
}
