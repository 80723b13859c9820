//! Strided matrix product backed by `matrixmultiply`.

/// Row/column strides of a matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// Below this many rows (or inner length) packing for the blocked kernel
/// costs more than it saves.
const THIN: usize = 4;

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64], lc: Layout) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta != 1.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * lc.rs + j * lc.cs] *= beta;
                }
            }
        }
        return;
    }
    assert!(la.span(m, k) <= a.len(), "gemm: lhs out of bounds");
    assert!(lb.span(k, n) <= b.len(), "gemm: rhs out of bounds");
    assert!(lc.span(m, n) <= c.len(), "gemm: output out of bounds");
    if (m <= THIN || k <= THIN) && lb.cs == 1 && lc.cs == 1 {
        // row of c += a[i,p] * row p of b
        for i in 0..m {
            let row = &mut c[i * lc.rs..i * lc.rs + n];
            if beta == 0.0 {
                row.fill(0.0);
            } else if beta != 1.0 {
                row.iter_mut().for_each(|v| *v *= beta);
            }
            for p in 0..k {
                let s = a[i * la.rs + p * la.cs];
                let brow = &b[p * lb.rs..p * lb.rs + n];
                row.iter_mut().zip(brow).for_each(|(v, x)| *v += s * x);
            }
        }
        return;
    }
    if m <= THIN && lb.rs == 1 && la.cs == 1 {
        // c[i,j] = dot(row i of a, column j of b)
        for i in 0..m {
            let arow = &a[i * la.rs..i * la.rs + k];
            for j in 0..n {
                let bcol = &b[j * lb.cs..j * lb.cs + k];
                let d = dot(arow, bcol);
                let v = &mut c[i * lc.rs + j * lc.cs];
                *v = if beta == 0.0 { d } else { beta * *v + d };
            }
        }
        return;
    }
    // SAFETY: the three asserts above bound every index the kernel touches,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// Four independent accumulators, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
