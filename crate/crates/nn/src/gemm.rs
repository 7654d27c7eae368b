//! Safe front for `matrixmultiply::dgemm`.

/// Strided view of a row-major buffer used as a gemm operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        Self { data, offset: 0, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn rm_t(data: &'a [f64], cols: usize) -> Self {
        Self { data, offset: 0, rs: 1, cs: cols }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

/// `c[offset..] = alpha * a * b + beta * c` for `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c_offset + (m - 1) * c_rs + (n - 1) * c_cs;
    assert!(last < c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c_offset + i * c_rs + j * c_cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index the kernel touches was bounds-checked above; the
    // output slice is uniquely borrowed and never aliases the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_rs as isize,
            c_cs as isize,
        );
    }
}
