//! Strided double-precision matrix multiply over `matrixmultiply`.

/// Row and column stride of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major storage with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Strides { row: cols, col: 1 }
    }

    /// Transposed view of row-major storage with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols }
    }
}

fn max_offset(r: usize, c: usize, s: Strides) -> usize {
    if r == 0 || c == 0 {
        0
    } else {
        (r - 1) * s.row + (c - 1) * s.col
    }
}

/// `C = alpha * A·B + beta * C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_offset(m, k, sa) < a.len(), "gemm: A out of bounds");
        assert!(max_offset(k, n, sb) < b.len(), "gemm: B out of bounds");
    }
    assert!(max_offset(m, n, sc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every element addressed by the strides lies inside the slices
    // (checked above) and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
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
    fn small_product_and_transpose_views() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, Strides::rows(3), &b, Strides::rows(2), 0.0, &mut c, Strides::rows(2));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // Aᵀ·A using the transposed view of A (3×2 times 2×3).
        let mut g = [0.0; 9];
        gemm(3, 2, 3, 1.0, &a, Strides::transposed(3), &a, Strides::rows(3), 0.0, &mut g, Strides::rows(3));
        assert_eq!(g, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
