//! Raw numeric kernels over flat `f64` buffers: GEMM, the linear-recurrence
//! scans behind every state-space/linear-attention operator, and causal
//! (optionally windowed) softmax attention.

pub mod attention;
pub mod scan;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    /// `data` stored row-major with `cols` columns.
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major buffer with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with `c` row-major m×n.
///
/// Each output element accumulates its `k` products in ascending order with
/// separate multiply and add, so results are bit-identical to a naive
/// triple loop regardless of vector width.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    let c = &mut c[..m * n];
    if beta == 0.0 {
        c.iter_mut().for_each(|x| *x = 0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|x| *x *= beta);
    }
    if k == 0 {
        return;
    }
    let a = pack(a, m, k);
    let b = pack(b, k, n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for p in 0..k {
            let aip = alpha * arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Contiguous row-major copy of a strided view (borrowed when already so).
fn pack<'a>(v: Mat<'a>, rows: usize, cols: usize) -> std::borrow::Cow<'a, [f64]> {
    if v.cs == 1 && v.rs == cols as isize {
        return std::borrow::Cow::Borrowed(&v.data[..rows * cols]);
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(v.data[(r as isize * v.rs + c as isize * v.cs) as usize]);
        }
    }
    std::borrow::Cow::Owned(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_views_match_explicit_transpose() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|i| (i * i) as f64 - 9.0).collect(); // 2×4
                                                                          // a · bᵀ  (3×2)
        let mut c = vec![0.0; 6];
        gemm(3, 4, 2, 1.0, Mat::row_major(&a, 4), Mat::transposed(&b, 4), 0.0, &mut c);
        let mut bt = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                bt[j * 2 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(c, naive(3, 4, 2, &a, &bt));
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, 1.0, Mat::row_major(&a, 2), Mat::row_major(&b, 1), 1.0, &mut c);
        assert_eq!(c, [21.0]);
    }
}
