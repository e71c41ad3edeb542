//! Slice-level numeric kernels shared by the eager ops and the tape.
//!
//! Every kernel processes rows independently and in a fixed accumulation
//! order, so computing a single row gives bit-identical results to computing
//! the same row as part of a larger batch. The KV-cache decoder relies on this.

/// `sqrt(2/pi)` for the tanh approximation of GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_A: f64 = 0.044_715;
/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-5;
/// Base of the rotary frequency ladder.
pub const ROPE_BASE: f64 = 10_000.0;

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in index order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
    c
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for t in 0..k {
                s += arow[t] * brow[t];
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    if cols > 0 {
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotation angle for pair `t` of a head of width `head_dim` at `pos`.
pub fn rope_angle(pos: usize, t: usize, head_dim: usize) -> f64 {
    let inv_freq = ROPE_BASE.powf(-((2 * t) as f64) / head_dim as f64);
    pos as f64 * inv_freq
}

/// Rotates consecutive channel pairs within every head of every row.
/// Row `i` sits at absolute position `offset + i`. `sign = -1` applies the
/// inverse rotation (used by the adjoint).
pub fn rope(x: &[f64], cols: usize, n_heads: usize, offset: usize, sign: f64) -> Vec<f64> {
    let head_dim = cols / n_heads;
    let mut out = x.to_vec();
    for (i, row) in out.chunks_mut(cols).enumerate() {
        let pos = offset + i;
        for h in 0..n_heads {
            let base = h * head_dim;
            for t in 0..head_dim / 2 {
                let (s, c) = (sign * rope_angle(pos, t, head_dim)).sin_cos();
                let a = row[base + 2 * t];
                let b = row[base + 2 * t + 1];
                row[base + 2 * t] = a * c - b * s;
                row[base + 2 * t + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Per-row statistics kept by layer normalization for its adjoint.
pub struct NormStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], cols: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormStats) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let xh = (row[j] - mean) * rs;
            xhat[r * cols + j] = xh;
            out[r * cols + j] = xh * gain[j] + bias[j];
        }
    }
    (out, NormStats { xhat, rstd })
}

/// Multi-head scaled dot-product attention with a causal mask.
///
/// Query row `i` sits at absolute position `offset + i` and attends keys
/// `0..=offset + i`. Keys beyond that are never touched, so no masked
/// entries enter any sum. Returns the mixed values and the attention
/// probabilities laid out `[head][query][key]` (masked slots stay zero).
#[allow(clippy::too_many_arguments)]
pub fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_k: usize,
    dim: usize,
    n_heads: usize,
    offset: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hd = dim / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n_q * dim];
    let mut probs = vec![0.0; n_heads * n_q * n_k];
    for h in 0..n_heads {
        let c0 = h * hd;
        for i in 0..n_q {
            let visible = (offset + i + 1).min(n_k);
            let p = &mut probs[(h * n_q + i) * n_k..(h * n_q + i) * n_k + visible];
            let qrow = &q[i * dim + c0..i * dim + c0 + hd];
            for (j, pj) in p.iter_mut().enumerate() {
                let krow = &k[j * dim + c0..j * dim + c0 + hd];
                let mut s = 0.0;
                for t in 0..hd {
                    s += qrow[t] * krow[t];
                }
                *pj = s * scale;
            }
            softmax_in_place(p);
            let orow = &mut out[i * dim + c0..i * dim + c0 + hd];
            for (j, pj) in p.iter().enumerate() {
                let vrow = &v[j * dim + c0..j * dim + c0 + hd];
                for t in 0..hd {
                    orow[t] += pj * vrow[t];
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
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn sigmoid_is_symmetric_and_saturates_without_overflow() {
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn rope_inverse_restores_input() {
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = rope(&x, 8, 2, 5, 1.0);
        let z = rope(&y, 8, 2, 5, -1.0);
        for (a, b) in x.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_attention_matches_batched_row_bitwise() {
        let dim = 4;
        let n = 5;
        let q: Vec<f64> = (0..n * dim).map(|i| (i as f64 * 0.11).cos()).collect();
        let k: Vec<f64> = (0..n * dim).map(|i| (i as f64 * 0.23).sin()).collect();
        let v: Vec<f64> = (0..n * dim).map(|i| (i as f64 * 0.05).tan()).collect();
        let (full, _) = causal_attention(&q, &k, &v, n, n, dim, 2, 0);
        let last = &q[(n - 1) * dim..];
        let (one, _) = causal_attention(last, &k, &v, 1, n, dim, 2, n - 1);
        assert_eq!(&full[(n - 1) * dim..], &one[..]);
    }
}
