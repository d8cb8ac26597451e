//! Straight-line `f64` references for the integration tests.

#![allow(dead_code)]

use medtune::{Fill, Rng, Tensor};

pub fn rand(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::new(shape, Fill::Uniform { rng, lo, hi }).unwrap()
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - y).abs())
        .fold(0.0, f64::max)
}

/// `x [rows, din] · w [din, dout] + b`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let rows = x.len() / din;
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + o];
            }
            y[r * dout + o] = acc;
        }
    }
    y
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[i] = (row[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub struct BlockWeights {
    pub g1: Vec<f64>,
    pub b1: Vec<f64>,
    pub wqkv: Vec<f64>,
    pub bqkv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub g2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w1: Vec<f64>,
    pub bb1: Vec<f64>,
    pub w2: Vec<f64>,
    pub bb2: Vec<f64>,
}

/// Pre-norm block on `[n, t, d]` tokens, one head at a time.
pub fn attention_block(
    x: &[f64],
    n: usize,
    t: usize,
    d: usize,
    heads: usize,
    hidden: usize,
    w: &BlockWeights,
) -> Vec<f64> {
    let dh = d / heads;
    let h1 = layer_norm(x, &w.g1, &w.b1, d, 1e-5);
    let qkv = linear(&h1, &w.wqkv, &w.bqkv, d, 3 * d);
    let mut ctx = vec![0.0; n * t * d];
    for b in 0..n {
        for h in 0..heads {
            let at = |tok: usize, which: usize, j: usize| qkv[(b * t + tok) * 3 * d + which * d + h * dh + j];
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|k| (0..dh).map(|j| at(i, 0, j) * at(k, 1, j)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..dh {
                    ctx[(b * t + i) * d + h * dh + j] = (0..t).map(|k| e[k] / z * at(k, 2, j)).sum();
                }
            }
        }
    }
    let o = linear(&ctx, &w.wo, &w.bo, d, d);
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let h2 = layer_norm(&x1, &w.g2, &w.b2, d, 1e-5);
    let m: Vec<f64> = linear(&h2, &w.w1, &w.bb1, d, hidden).into_iter().map(gelu).collect();
    let m = linear(&m, &w.w2, &w.bb2, hidden, d);
    x1.iter().zip(&m).map(|(a, b)| a + b).collect()
}

/// 2×2 neighbourhood concat in (0,0), (0,1), (1,0), (1,1) order, then `4d → dout`.
pub fn patch_merge(x: &[f64], n: usize, h: usize, w: usize, d: usize, wt: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut cat = Vec::with_capacity(x.len());
    for bi in 0..n {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let tok = (2 * i + di) * w + 2 * j + dj;
                    cat.extend_from_slice(&x[(bi * h * w + tok) * d..(bi * h * w + tok + 1) * d]);
                }
            }
        }
    }
    linear(&cat, wt, b, 4 * d, dout)
}

/// Softmax probabilities of `[B, K, inner]` logits at `(b, ·, i)`.
fn probs(z: &[f64], k: usize, inner: usize, b: usize, i: usize) -> Vec<f64> {
    let row: Vec<f64> = (0..k).map(|c| z[(b * k + c) * inner + i]).collect();
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean per-voxel cross-entropy.
pub fn cross_entropy(z: &[f64], shape: &[usize], labels: &[u8]) -> f64 {
    let (bn, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut total = 0.0;
    for b in 0..bn {
        for i in 0..inner {
            let p = probs(z, k, inner, b, i);
            total -= p[labels[b * inner + i] as usize].ln();
        }
    }
    total / (bn * inner) as f64
}

/// `1 − mean_k (2·I_k + 1) / (P_k + Y_k + 1)` with batch-global sums.
pub fn soft_dice(z: &[f64], shape: &[usize], labels: &[u8]) -> f64 {
    let (bn, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut acc = vec![(0.0, 0.0, 0.0); k];
    for b in 0..bn {
        for i in 0..inner {
            let p = probs(z, k, inner, b, i);
            let y = labels[b * inner + i] as usize;
            for c in 0..k {
                let yc = if c == y { 1.0 } else { 0.0 };
                acc[c].0 += p[c] * yc;
                acc[c].1 += p[c];
                acc[c].2 += yc;
            }
        }
    }
    1.0 - acc.iter().map(|(i, p, y)| (2.0 * i + 1.0) / (p + y + 1.0)).sum::<f64>() / k as f64
}
