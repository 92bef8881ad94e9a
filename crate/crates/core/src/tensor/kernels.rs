use super::Element;

/// Row and column strides of a matrix view, in elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatLayout {
    pub row: isize,
    pub col: isize,
}

impl MatLayout {
    /// Contiguous row-major matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        MatLayout {
            row: cols as isize,
            col: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns in storage.
    pub fn transposed(cols: usize) -> Self {
        MatLayout {
            row: 1,
            col: cols as isize,
        }
    }
}

pub(crate) fn check_extent(rows: usize, cols: usize, len: usize, layout: MatLayout) {
    assert!(layout.row >= 0 && layout.col >= 0, "negative strides unsupported");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * layout.row as usize + (cols - 1) * layout.col as usize;
    assert!(last < len, "matrix view exceeds buffer: {last} >= {len}");
}

/// `c = a[m×k] · b[k×n]` for row-major contiguous operands.
pub fn matmul_into<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        a,
        MatLayout::row_major(k),
        b,
        MatLayout::row_major(n),
        T::zero(),
        c,
        MatLayout::row_major(n),
    );
}
