//! Safe strided wrapper over `matrixmultiply::dgemm`.
//!
//! Every matrix argument is a view into a flat buffer described by an offset
//! and non-negative row/column strides, so transposes and shifted windows are
//! expressed without copying.

#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Contiguous row-major `rows x cols` block starting at `off`.
    pub fn row_major(off: usize, rows: usize, cols: usize) -> Self {
        View {
            off,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            off: self.off,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self, len: usize) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < len, "gemm view out of bounds: {self:?} over {len}");
    }
}

/// `c = alpha * a * b + beta * c` on strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert_eq!(av.cols, bv.rows, "gemm inner extent");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    av.check(a.len());
    bv.check(b.len());
    cv.check(c.len());
    // SAFETY: all three views were bounds-checked above against their
    // buffers; `c` is uniquely borrowed and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
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

    #[test]
    fn matches_naive_product_with_transposed_views() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // 4x2
        let expect = naive(&a, 3, 4, &b, 2);
        let mut c = vec![0.0; 6];
        gemm(
            1.0,
            &a,
            View::row_major(0, 3, 4),
            &b,
            View::row_major(0, 4, 2),
            0.0,
            &mut c,
            View::row_major(0, 3, 2),
        );
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // (b^T a^T)^T == a b, written through a transposed output view.
        let mut ct = vec![0.0; 6];
        gemm(
            1.0,
            &b,
            View::row_major(0, 4, 2).t(),
            &a,
            View::row_major(0, 3, 4).t(),
            0.0,
            &mut ct,
            View::row_major(0, 3, 2).t(),
        );
        for (x, y) in ct.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn rejects_out_of_bounds_view() {
        let a = vec![0.0; 4];
        let mut c = vec![0.0; 4];
        gemm(
            1.0,
            &a,
            View::row_major(1, 2, 2),
            &a,
            View::row_major(0, 2, 2),
            0.0,
            &mut c,
            View::row_major(0, 2, 2),
        );
    }
}
