//! Strided single-precision GEMM over slices.

/// Row/column strides of a matrix view into a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major storage with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of row-major storage with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

/// `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
    sc: Strides,
) {
    assert!(sa.span(m, k) <= a.len(), "gemm: lhs view out of bounds");
    assert!(sb.span(k, n) <= b.len(), "gemm: rhs view out of bounds");
    assert!(sc.span(m, n) <= c.len(), "gemm: output view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a: 2x3, b: 2x3 -> a·bᵀ is 2x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0; 4];
        gemm(
            2,
            3,
            2,
            1.0,
            &a,
            Strides::row_major(3),
            &b,
            Strides::transposed(3),
            0.0,
            &mut c,
            Strides::row_major(2),
        );
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
    }

    #[test]
    fn accumulates_with_beta() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [1.0];
        gemm(
            1,
            2,
            1,
            1.0,
            &a,
            Strides::row_major(2),
            &b,
            Strides::row_major(1),
            1.0,
            &mut c,
            Strides::row_major(1),
        );
        assert_eq!(c, [12.0]);
    }
}
