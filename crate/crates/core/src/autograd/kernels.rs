//! Raw slice kernels shared by forward and backward passes.

use crate::tensor::Scalar;

pub const LAYER_NORM_EPS: Scalar = 1e-5;

const GELU_C: Scalar = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Scalar = 0.044_715;

/// `a[m×k] · b[k×n]`, accumulated into `out[m×n]`.
pub fn matmul_acc(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `a[m×k] · b[n×k]ᵀ`, accumulated into `out[m×n]`.
pub fn matmul_nt_acc(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `a[r×p]ᵀ · b[r×q]`, accumulated into `out[p×q]`.
pub fn matmul_tn_acc(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], r: usize, p: usize, q: usize) {
    for row in 0..r {
        let a_row = &a[row * p..(row + 1) * p];
        let b_row = &b[row * q..(row + 1) * q];
        for (i, &ai) in a_row.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let out_row = &mut out[i * q..(i + 1) * q];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += ai * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[Scalar], b: &[Scalar]) -> Scalar {
    // four partial sums so the loop vectorizes; order is fixed, so results are reproducible
    let mut acc = [0.0 as Scalar; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn gelu(x: Scalar) -> Scalar {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: Scalar) -> Scalar {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable softmax of one slice, written into `out`.
pub fn softmax_row(x: &[Scalar], out: &mut [Scalar]) {
    let max = x.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_softmax_row(x: &[Scalar], out: &mut [Scalar]) {
    let max = x.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let sum: Scalar = x.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}
