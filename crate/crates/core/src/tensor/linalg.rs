//! Dense kernels shared by the differentiable ops.

/// `c = beta * c + op(a) * op(b)` for row-major operands.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every strided access stays
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out += a * b` for square `s x s` row-major blocks.
#[inline]
pub(crate) fn pose_mul_acc(s: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..s {
        for k in 0..s {
            let x = a[r * s + k];
            let brow = &b[k * s..k * s + s];
            let orow = &mut out[r * s..r * s + s];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `out += a^T * b`.
#[inline]
pub(crate) fn pose_mul_tn_acc(s: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for k in 0..s {
        for r in 0..s {
            let x = a[k * s + r];
            let brow = &b[k * s..k * s + s];
            let orow = &mut out[r * s..r * s + s];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `out += a * b^T`.
#[inline]
pub(crate) fn pose_mul_nt_acc(s: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..s {
        let arow = &a[r * s..r * s + s];
        for c in 0..s {
            let brow = &b[c * s..c * s + s];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[r * s + c] += acc;
        }
    }
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

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta, bb, tb) in [
            (&a, false, &b, false),
            (&at, true, &b, false),
            (&a, false, &bt, true),
            (&at, true, &bt, true),
        ] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pose_products_agree_with_gemm() {
        let s = 4;
        let a: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        let b: Vec<f64> = (0..16).map(|i| (i as f64).sqrt()).collect();
        let mut nn = vec![0.0; 16];
        pose_mul_acc(s, &a, &b, &mut nn);
        assert_eq!(nn, naive(4, 4, 4, &a, &b));

        let mut tn = vec![0.0; 16];
        pose_mul_tn_acc(s, &a, &b, &mut tn);
        assert_eq!(tn, naive(4, 4, 4, &transpose(4, 4, &a), &b));

        let mut nt = vec![0.0; 16];
        pose_mul_nt_acc(s, &a, &b, &mut nt);
        let want = naive(4, 4, 4, &a, &transpose(4, 4, &b));
        for (x, y) in nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
