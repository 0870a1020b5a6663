//! Slice-level numeric kernels shared by the autodiff graph and by the
//! graph-free inference paths.

use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a[m,k] @ b[k,n]`, optionally reading either operand transposed from its
/// stored layout (`a` stored as `[k,m]`, `b` stored as `[n,k]`).
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_into(a, b, &mut c, m, k, n, trans_a, trans_b, false);
    c
}

/// Like [`matmul`] but writes (or accumulates, when `accumulate`) into `c`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    T::from_f64_lossy(0.5 * xf * (1.0 + u.tanh()))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    T::from_f64_lossy(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
}

pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e.as_f64();
        }
        let inv = T::from_f64_lossy(1.0 / sum);
        out[r * cols..(r + 1) * cols]
            .iter_mut()
            .for_each(|o| *o *= inv);
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
        let lse = max.as_f64() + sum.ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = T::from_f64_lossy(v.as_f64() - lse);
        }
    }
    out
}

/// Row-wise layer normalization. Returns `(normalized_pre_affine, mean, rstd)`.
pub fn layer_norm_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); rows * cols];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = T::from_f64_lossy((v.as_f64() - mean) * rstd);
        }
        means.push(T::from_f64_lossy(mean));
        rstds.push(T::from_f64_lossy(rstd));
    }
    (xhat, means, rstds)
}

/// Shape and masking of a multi-head attention call over `batch` packed
/// sequences of length `seq` (rows `b*seq .. (b+1)*seq`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * seq` flags; `false` marks padding keys.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnSpec {
    pub fn new(batch: usize, seq: usize, heads: usize) -> Self {
        Self {
            batch,
            seq,
            heads,
            causal: false,
            key_mask: None,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(mask);
        self
    }

    pub(crate) fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_mask.as_ref().is_none_or(|m| m[b * self.seq + j])
    }
}

/// Scaled dot-product attention. `q`, `k`, `v` are `[batch*seq, d]`.
/// Returns the output and the attention probabilities
/// (`[batch, heads, seq, seq]`, zeros where masked).
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    spec: &AttnSpec,
) -> (Vec<T>, Vec<T>) {
    let AttnSpec {
        batch, seq, heads, ..
    } = *spec;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![0.0f64; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..seq {
                    if spec.visible(b, i, j) {
                        let kj = &k[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        let s: f64 = qi
                            .iter()
                            .zip(kj)
                            .map(|(a, c)| (*a * *c).as_f64())
                            .sum::<f64>()
                            * scale;
                        scores[j] = s;
                        max = max.max(s);
                    } else {
                        scores[j] = f64::NEG_INFINITY;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
                    sum += *s;
                }
                let prow = &mut probs
                    [((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                for (p, s) in prow.iter_mut().zip(&scores) {
                    *p = T::from_f64_lossy(s / sum);
                }
                let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                for j in 0..seq {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &v[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_scaled_one_hot() {
        let p = softmax_rows(&[10.0f64, 0.0, 0.0], 1, 3);
        let denom = 10f64.exp() + 2.0;
        assert!((p[0] - 10f64.exp() / denom).abs() < 1e-12);
        assert!((p[0] - 0.99991).abs() < 1e-5);
        assert!((p[1] - 0.0000454).abs() < 1e-7);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = [0.3f32, -1.2, 2.5, 0.0, 7.0];
        let p = softmax_rows(&x, 1, 5);
        let lp = log_softmax_rows(&x, 1, 5);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-5);
        }
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let (y, _, _) = layer_norm_rows(&[3.0f32; 8], 1, 8);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn transposed_matmul_layouts_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // [3,2]
        let c = matmul(&a, &b, 2, 3, 2, false, false);
        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 2);
        assert_eq!(matmul(&at, &b, 2, 3, 2, true, false), c);
        assert_eq!(matmul(&a, &bt, 2, 3, 2, false, true), c);
        assert_eq!(c, vec![0.5, 7.0, 2.0, 16.0]);
    }
}
