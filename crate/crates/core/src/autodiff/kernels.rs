//! Slice-level numeric kernels used by the tape's forward and backward rules.
//!
//! Everything here is single-threaded and accumulates in a fixed order, so two
//! runs over identical inputs produce bit-identical results.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `c[m×n] (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// Storage of `a` is `[m×k]` (or `[k×m]` when `trans_a`), `b` is `[k×n]`
/// (or `[n×k]` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * n + j] += dot(arow, brow);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators; the order is fixed, so results stay deterministic.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Left/right zero padding for a "same" convolution. Even kernels pad one
/// extra sample on the right.
pub fn same_padding(kernel: usize) -> (usize, usize) {
    let total = kernel - 1;
    let left = total / 2;
    (left, total - left)
}

/// `y[t] += Σ_j w[j] · x[t + j - pad_left]` with zeros outside `x`.
pub fn conv_same_row(x: &[f64], w: &[f64], y: &mut [f64], pad_left: usize) {
    let len = x.len();
    debug_assert_eq!(y.len(), len);
    for (j, &wj) in w.iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        // Output positions t where source index s = t + j - pad_left is valid.
        let shift = j as isize - pad_left as isize;
        let t0 = (-shift).max(0) as usize;
        let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
        if t0 >= t1 {
            continue;
        }
        let s0 = (t0 as isize + shift) as usize;
        let src = &x[s0..s0 + (t1 - t0)];
        for (yv, xv) in y[t0..t1].iter_mut().zip(src) {
            *yv += wj * xv;
        }
    }
}

/// Transposed companion of [`conv_same_row`]: `dx[s] += Σ_j w[j] · dy[s - j + pad_left]`.
pub fn conv_same_row_transpose(dy: &[f64], w: &[f64], dx: &mut [f64], pad_left: usize) {
    let len = dy.len();
    for (j, &wj) in w.iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        let shift = j as isize - pad_left as isize;
        let t0 = (-shift).max(0) as usize;
        let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
        if t0 >= t1 {
            continue;
        }
        let s0 = (t0 as isize + shift) as usize;
        let dst = &mut dx[s0..s0 + (t1 - t0)];
        for (dv, gv) in dst.iter_mut().zip(&dy[t0..t1]) {
            *dv += wj * gv;
        }
    }
}

/// Kernel gradient: `dw[j] += Σ_t dy[t] · x[t + j - pad_left]`.
pub fn conv_same_row_kernel_grad(dy: &[f64], x: &[f64], dw: &mut [f64], pad_left: usize) {
    let len = x.len();
    for (j, dwj) in dw.iter_mut().enumerate() {
        let shift = j as isize - pad_left as isize;
        let t0 = (-shift).max(0) as usize;
        let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
        if t0 >= t1 {
            continue;
        }
        let s0 = (t0 as isize + shift) as usize;
        *dwj += dot(&dy[t0..t1], &x[s0..s0 + (t1 - t0)]);
    }
}

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// In-place numerically stable softmax of one contiguous row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of a row, stable.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Splits a shape around `axis` into (outer, axis_len, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialises `x` permuted so that output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        // odometer increment over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_all_transpose_modes_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(aa, bb, &mut c, m, k, n, ta, tb);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "mode {ta}/{tb}");
            }
        }
    }

    #[test]
    fn same_padding_even_kernel_pads_right() {
        assert_eq!(same_padding(3), (1, 1));
        assert_eq!(same_padding(16), (7, 8));
        assert_eq!(same_padding(64), (31, 32));
        assert_eq!(same_padding(1), (0, 0));
    }

    #[test]
    fn conv_row_matches_direct_definition() {
        let x: Vec<f64> = (0..11).map(|i| (i as f64).sqrt() - 1.0).collect();
        for k in [1usize, 2, 3, 4, 7, 16] {
            let w: Vec<f64> = (0..k).map(|j| 0.1 * j as f64 - 0.2).collect();
            let (pl, _) = same_padding(k);
            let mut y = vec![0.0; x.len()];
            conv_same_row(&x, &w, &mut y, pl);
            for t in 0..x.len() {
                let mut want = 0.0;
                for j in 0..k {
                    let s = t as isize + j as isize - pl as isize;
                    if s >= 0 && (s as usize) < x.len() {
                        want += w[j] * x[s as usize];
                    }
                }
                assert!((y[t] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)>
        let x: Vec<f64> = (0..13).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let g: Vec<f64> = (0..13).map(|i| (i as f64 * 0.3).sin()).collect();
        let w = [0.5, -1.0, 0.25, 2.0];
        let (pl, _) = same_padding(w.len());
        let mut y = vec![0.0; 13];
        conv_same_row(&x, &w, &mut y, pl);
        let mut dx = vec![0.0; 13];
        conv_same_row_transpose(&g, &w, &mut dx, pl);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let (p, ps) = permute(&data, &shape, &perm);
        assert_eq!(ps, vec![4, 2, 3]);
        // p[k, i, j] == data[i, j, k]
        assert_eq!(p[(3 * 2 + 1) * 3 + 2], data[(1 * 3 + 2) * 4 + 3]);
        let (back, bs) = permute(&p, &ps, &inverse_permutation(&perm));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // x·Φ(x) at x = 1, Φ(1) = 0.841344746...
        assert!((gelu(1.0) - 0.841_344_746).abs() < 1e-8);
        assert!((gelu(-1.0) + 0.158_655_254).abs() < 1e-8);
    }
}
