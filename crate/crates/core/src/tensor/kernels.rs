//! Slice-level numeric kernels shared by the forward and backward passes.

use super::storage::Scalar;

/// `a [n×m] · b [m×p]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * p];
    let m4 = m - m % 4;
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * m..(i + 1) * m];
        for k in (0..m4).step_by(4) {
            let (a0, a1, a2, a3) = (arow[k], arow[k + 1], arow[k + 2], arow[k + 3]);
            if a0 == T::zero() && a1 == T::zero() && a2 == T::zero() && a3 == T::zero() {
                continue;
            }
            let b0 = &b[k * p..(k + 1) * p];
            let b1 = &b[(k + 1) * p..(k + 2) * p];
            let b2 = &b[(k + 2) * p..(k + 3) * p];
            let b3 = &b[(k + 3) * p..(k + 4) * p];
            for j in 0..p {
                row[j] = row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for k in m4..m {
            let av = arow[k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a [n×m] · bᵀ` where `b` is stored `[p×m]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    // The row-axpy form of `matmul` vectorizes far better than per-entry dots.
    matmul(a, &transpose(b, p, m), n, m, p)
}

/// `aᵀ · b` where `a` is stored `[n×m]` and `b` is `[n×p]`; result `[m×p]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    let n4 = n - n % 4;
    for i in (0..n4).step_by(4) {
        let b0 = &b[i * p..(i + 1) * p];
        let b1 = &b[(i + 1) * p..(i + 2) * p];
        let b2 = &b[(i + 2) * p..(i + 3) * p];
        let b3 = &b[(i + 3) * p..(i + 4) * p];
        for k in 0..m {
            let (a0, a1, a2, a3) = (a[i * m + k], a[(i + 1) * m + k], a[(i + 2) * m + k], a[(i + 3) * m + k]);
            if a0 == T::zero() && a1 == T::zero() && a2 == T::zero() && a3 == T::zero() {
                continue;
            }
            let row = &mut out[k * p..(k + 1) * p];
            for j in 0..p {
                row[j] = row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
    }
    for i in n4..n {
        let brow = &b[i * p..(i + 1) * p];
        for k in 0..m {
            let av = a[i * m + k];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the compiler vectorize without reassociating.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Softmax over the axis with the given `(outer, axis_len, inner)` strides.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / sum;
            }
        }
    }
    out
}

/// Row-wise log-softmax of a `[rows×cols]` buffer.
pub fn log_softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for c in 0..cols {
            out[r * cols + c] = row[c] - lse;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Indices of the `k` largest values, ties broken by lowest index.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let k = k.min(row.len());
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < row.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_prefers_lower_index_on_ties() {
        let row = [1.0f64, 3.0, 3.0, 3.0, 0.5];
        assert_eq!(top_k_indices(&row, 2), vec![1, 2]);
        assert_eq!(top_k_indices(&row, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn top_k_keeps_largest_by_value_not_magnitude() {
        let row = [-10.0f64, 1.0, 2.0, -0.5];
        assert_eq!(top_k_indices(&row, 2), vec![1, 2]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let nn = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), nn);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), nn);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
