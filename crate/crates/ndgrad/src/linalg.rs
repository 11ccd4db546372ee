//! Plain buffer kernels shared by the tape and by graph-free inference code.

/// `c = a · b` for row-major `a: [n, k]`, `b: [k, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    gemm(a, (k, 1), b, (m, 1), &mut c, n, k, m, 0.0);
    c
}

/// `c = a · bᵀ` for row-major `a: [n, k]`, `b: [m, k]`.
pub fn matmul_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    gemm(a, (k, 1), b, (1, k), &mut c, n, k, m, 0.0);
    c
}

/// `c = aᵀ · b` for row-major `a: [k, n]`, `b: [k, m]`.
pub fn matmul_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    gemm(a, (1, n), b, (m, 1), &mut c, n, k, m, 0.0);
    c
}

/// General strided product `c = a·b + beta·c`, with `(row_stride, col_stride)` per operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
    beta: f64,
) {
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    // SAFETY: bounds asserted above; strides describe views that stay inside
    // the asserted lengths for the given dimensions.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Overflow-safe softplus: `max(x, 0) + ln(1 + e^{-|x|})`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis of a `[rows, cols]` buffer.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![-1.0, 7.5, -1.0, 18.0]);
        // b^T stored as 2x3
        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 1.0];
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), c);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_at(&at, &b, 2, 3, 2), c);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
