use super::Scalar;

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Layout {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Layout {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows.max(1) - 1) * self.rs + (cols.max(1) - 1) * self.cs
    }
}

/// `c = alpha * a(m×k) * b(k×n) + beta * c(m×n)`, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(la.last(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.last(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every element the kernel can touch.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
