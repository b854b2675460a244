//! Raw dense kernels shared by the tape ops.

/// Strided view of a row-major matrix stored in a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatView<'a> {
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Column block `[col0, col0 + width)` of rows `[row0, row0 + rows)` of a
    /// dense `total_cols`-wide matrix.
    pub fn block(
        data: &'a [f64],
        total_cols: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        width: usize,
    ) -> Self {
        Self {
            data,
            offset: row0 * total_cols + col0,
            rows,
            cols: width,
            row_stride: total_cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset
            + (self.rows - 1) * self.row_stride.unsigned_abs()
            + (self.cols - 1) * self.col_stride.unsigned_abs()
    }
}

/// Mutable strided destination.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
}

impl<'a> MatMut<'a> {
    pub fn dense(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols as isize,
        }
    }

    pub fn block(
        data: &'a mut [f64],
        total_cols: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        width: usize,
    ) -> Self {
        Self {
            data,
            offset: row0 * total_cols + col0,
            rows,
            cols: width,
            row_stride: total_cols as isize,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.max_index() < a.data.len() || a.rows * a.cols == 0);
    assert!(b.max_index() < b.data.len() || b.rows * b.cols == 0);
    let c_max = c.offset + (c.rows - 1) * c.row_stride.unsigned_abs() + (c.cols - 1);
    assert!(c_max < c.data.len());
    // SAFETY: every index touched by dgemm is bounded by the max_index checks
    // above, and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr().add(b.offset),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride,
            1,
        );
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-|z|))`, the stable tail of the logistic loss.
pub(crate) fn softplus_neg_abs(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(1.0, MatView::dense(&a, 2, 3), MatView::dense(&b, 3, 4), 0.0, MatMut::dense(&mut c, 2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // (a^T)^T @ b through a transposed view of a 3x2 buffer
        let at: Vec<f64> = (0..3).flat_map(|k| (0..2).map(move |i| (k, i))).map(|(k, i)| a[i * 3 + k]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(1.0, MatView::dense(&at, 3, 2).t(), MatView::dense(&b, 3, 4), 0.0, MatMut::dense(&mut c2, 2, 4));
        assert_eq!(c, c2);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
