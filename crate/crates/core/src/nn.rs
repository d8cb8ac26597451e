//! Differentiable building blocks: dense and pointwise projections,
//! factorized depthwise 3D convolutions, patch embedding, pre-norm
//! self-attention blocks and patch merging.
//!
//! Convolutions are correlations (no kernel flip) with zero same-padding.

use rayon::prelude::*;

use crate::autodiff::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::autodiff::{BackwardCtx, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Weight `[in, out]` and bias `[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

impl<T: Copy> Dense<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Dense<U> {
        Dense {
            weight: f(self.weight),
            bias: f(self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T: Copy> LayerNormParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(self.gamma),
            beta: f(self.beta),
        }
    }
}

/// Per-channel `1×K×K` spatial kernel followed by a `K×1×1` depth kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthwiseKernelPair<T> {
    /// `[C', 1, K, K]`
    pub spatial: T,
    /// `[C', K, 1, 1]`
    pub depth: T,
    pub bias_spatial: T,
    pub bias_depth: T,
    pub k: usize,
}

impl<T: Copy> DepthwiseKernelPair<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> DepthwiseKernelPair<U> {
        DepthwiseKernelPair {
            spatial: f(self.spatial),
            depth: f(self.depth),
            bias_spatial: f(self.bias_spatial),
            bias_depth: f(self.bias_depth),
            k: self.k,
        }
    }
}

/// Pre-norm Transformer block: LN → MHSA → residual → LN → MLP → residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionBlockParams<T> {
    pub norm1: LayerNormParams<T>,
    /// `[d, 3d]`, output columns ordered q, k, v, each split into heads.
    pub qkv: Dense<T>,
    pub proj: Dense<T>,
    pub norm2: LayerNormParams<T>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub heads: usize,
}

impl<T: Copy> AttentionBlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> AttentionBlockParams<U> {
        AttentionBlockParams {
            norm1: self.norm1.map(&mut f),
            qkv: self.qkv.map(&mut f),
            proj: self.proj.map(&mut f),
            norm2: self.norm2.map(&mut f),
            fc1: self.fc1.map(&mut f),
            fc2: self.fc2.map(&mut f),
            heads: self.heads,
        }
    }
}

pub fn dense_count(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

pub fn dw_pair_count(channels: usize, k: usize) -> usize {
    channels * (k * k + k + 2)
}

pub fn attention_block_count(d: usize, hidden: usize) -> usize {
    4 * d + dense_count(d, 3 * d) + dense_count(d, d) + dense_count(d, hidden) + dense_count(hidden, d)
}

pub fn patch_merge_count(d: usize) -> usize {
    dense_count(4 * d, 2 * d)
}

struct LinearOp {
    rows: usize,
    d_in: usize,
    d_out: usize,
}

impl Op for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (m, k, n) = (self.rows, self.d_in, self.d_out);
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let dx = ctx.needs_grad[0].then(|| {
            let mut dx = vec![0.0; m * k];
            gemm_nt(g, w, &mut dx, m, n, k);
            dx
        });
        let dw = ctx.needs_grad[1].then(|| {
            let mut dw = vec![0.0; k * n];
            gemm_tn(x, g, &mut dw, k, m, n);
            dw
        });
        let db = ctx.needs_grad[2].then(|| {
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            db
        });
        vec![dx, dw, db]
    }
}

/// `x·W + b` over the last axis of `x` (any rank ≥ 1).
pub fn linear(tape: &mut Tape, x: Var, p: Dense<Var>) -> Result<Var> {
    for v in [x, p.weight, p.bias] {
        tape.check(v)?;
    }
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(p.weight).to_vec();
    let bs = tape.shape(p.bias).to_vec();
    let d_in = *xs.last().expect("tensors have rank ≥ 1");
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::mismatch("linear", &xs, &ws));
    }
    let d_out = ws[1];
    if bs != [d_out] {
        return Err(Error::mismatch("linear", &ws, &bs));
    }
    let rows = tape.value(x).len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    gemm_nn(tape.data(x), tape.data(p.weight), &mut out, rows, d_in, d_out);
    let b = tape.data(p.bias);
    for row in out.chunks_mut(d_out) {
        row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
    }
    let mut shape = xs;
    *shape.last_mut().expect("rank ≥ 1") = d_out;
    let value = Tensor::from_vec(&shape, out)?;
    Ok(tape.push(value, &[x, p.weight, p.bias], Box::new(LinearOp { rows, d_in, d_out })))
}

struct DepthwiseOp {
    batch: usize,
    channels: usize,
    dims: [usize; 3],
    kdims: [usize; 3],
}

impl DepthwiseOp {
    /// Calls `f(out_flat, in_flat, kernel_flat)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.dims;
        let [kd, kh, kw] = self.kdims;
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let o = (z * h + y) * w + x;
                    for a in 0..kd {
                        let Some(zz) = (z + a).checked_sub(pd).filter(|&v| v < d) else {
                            continue;
                        };
                        for b in 0..kh {
                            let Some(yy) = (y + b).checked_sub(ph).filter(|&v| v < h) else {
                                continue;
                            };
                            for c in 0..kw {
                                let Some(xx) = (x + c).checked_sub(pw).filter(|&v| v < w) else {
                                    continue;
                                };
                                f(o, (zz * h + yy) * w + xx, (a * kh + b) * kw + c);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f32], k: &[f32], bias: &[f32]) -> Vec<f32> {
        let vol: usize = self.dims.iter().product();
        let ksz: usize = self.kdims.iter().product();
        let mut out = vec![0.0f32; x.len()];
        out.par_chunks_mut(vol).enumerate().for_each(|(slab, o)| {
            let c = slab % self.channels;
            let xin = &x[slab * vol..(slab + 1) * vol];
            let kc = &k[c * ksz..(c + 1) * ksz];
            o.fill(bias[c]);
            self.for_each_tap(|oi, ii, ki| o[oi] += kc[ki] * xin[ii]);
        });
        out
    }
}

impl Op for DepthwiseOp {
    fn name(&self) -> &'static str {
        "dwconv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let vol: usize = self.dims.iter().product();
        let ksz: usize = self.kdims.iter().product();
        let x = ctx.inputs[0].data();
        let k = ctx.inputs[1].data();
        let need_x = ctx.needs_grad[0];
        let per_slab: Vec<(Vec<f32>, f32, Option<Vec<f32>>)> = (0..self.batch * self.channels)
            .into_par_iter()
            .map(|slab| {
                let c = slab % self.channels;
                let xin = &x[slab * vol..(slab + 1) * vol];
                let gs = &g[slab * vol..(slab + 1) * vol];
                let kc = &k[c * ksz..(c + 1) * ksz];
                let mut dk = vec![0.0f32; ksz];
                let mut dx = need_x.then(|| vec![0.0f32; vol]);
                self.for_each_tap(|oi, ii, ki| {
                    dk[ki] += gs[oi] * xin[ii];
                    if let Some(dx) = dx.as_mut() {
                        dx[ii] += kc[ki] * gs[oi];
                    }
                });
                (dk, gs.iter().sum(), dx)
            })
            .collect();
        let mut dk = vec![0.0f32; self.channels * ksz];
        let mut db = vec![0.0f32; self.channels];
        let mut dx = need_x.then(|| Vec::with_capacity(x.len()));
        for (slab, (dks, dbs, dxs)) in per_slab.into_iter().enumerate() {
            let c = slab % self.channels;
            dk[c * ksz..(c + 1) * ksz]
                .iter_mut()
                .zip(&dks)
                .for_each(|(a, b)| *a += b);
            db[c] += dbs;
            if let (Some(acc), Some(d)) = (dx.as_mut(), dxs) {
                acc.extend_from_slice(&d);
            }
        }
        vec![dx, ctx.needs_grad[1].then_some(dk), ctx.needs_grad[2].then_some(db)]
    }
}

fn require_volume(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 5 {
        return Err(Error::InvalidShape(format!(
            "{op} expects [B, C, D, H, W], got {shape:?}"
        )));
    }
    Ok(())
}

/// Depthwise correlation with a `[C,1,K,K]` (H/W plane) or `[C,K,1,1]`
/// (depth axis) kernel plus a per-channel bias.
pub fn dwconv3d_single(tape: &mut Tape, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    for v in [x, kernel, bias] {
        tape.check(v)?;
    }
    let xs = tape.shape(x).to_vec();
    require_volume("dwconv3d_single", &xs)?;
    let ks = tape.shape(kernel).to_vec();
    let c = xs[1];
    if ks.len() != 4 || ks[0] != c {
        return Err(Error::mismatch("dwconv3d_single", &xs, &ks));
    }
    let kdims = match ks[1..] {
        [1, a, b] if a == b => [1, a, a],
        [a, 1, 1] => [a, 1, 1],
        _ => {
            return Err(Error::InvalidShape(format!(
                "dwconv3d_single kernel must be [C,1,K,K] or [C,K,1,1], got {ks:?}"
            )))
        }
    };
    let kk = kdims.iter().copied().max().expect("three dims");
    if kk % 2 == 0 {
        return Err(Error::Config(format!("depthwise kernel size must be odd, got {kk}")));
    }
    if tape.shape(bias) != [c] {
        return Err(Error::mismatch("dwconv3d_single", &[c], tape.shape(bias)));
    }
    let op = DepthwiseOp {
        batch: xs[0],
        channels: c,
        dims: [xs[2], xs[3], xs[4]],
        kdims,
    };
    let out = op.forward(tape.data(x), tape.data(kernel), tape.data(bias));
    let value = Tensor::from_vec(&xs, out)?;
    Ok(tape.push(value, &[x, kernel, bias], Box::new(op)))
}

/// Spatial `1×K×K` pass followed by the depth `K×1×1` pass.
pub fn dwconv_cascade(tape: &mut Tape, x: Var, pair: DepthwiseKernelPair<Var>) -> Result<Var> {
    let s = dwconv3d_single(tape, x, pair.spatial, pair.bias_spatial)?;
    dwconv3d_single(tape, s, pair.depth, pair.bias_depth)
}

/// Per-voxel channel projection `[B, C_in, ...] → [B, C_out, ...]`.
pub fn conv3d_pointwise(tape: &mut Tape, x: Var, p: Dense<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    require_volume("conv3d_pointwise", &xs)?;
    let cl = tape.permute(x, &[0, 2, 3, 4, 1])?;
    let y = linear(tape, cl, p)?;
    tape.permute(y, &[0, 4, 1, 2, 3])
}

struct SubsampleOp {
    in_shape: Vec<usize>,
    stride: usize,
}

impl SubsampleOp {
    fn index_map(&self) -> Vec<usize> {
        let s = &self.in_shape;
        let (outer, h, w) = (
            s[..s.len() - 2].iter().product::<usize>(),
            s[s.len() - 2],
            s[s.len() - 1],
        );
        let mut map = Vec::with_capacity(outer * (h / self.stride) * (w / self.stride));
        for o in 0..outer {
            for y in (0..h).step_by(self.stride) {
                for x in (0..w).step_by(self.stride) {
                    map.push((o * h + y) * w + x);
                }
            }
        }
        map
    }
}

impl Op for SubsampleOp {
    fn name(&self) -> &'static str {
        "subsample_hw"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0; ctx.inputs[0].len()];
        for (gi, src) in g.iter().zip(self.index_map()) {
            dx[src] += gi;
        }
        vec![Some(dx)]
    }
}

/// Keeps every `stride`-th position along the two trailing axes.
pub fn subsample_hw(tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
    tape.check(x)?;
    let xs = tape.shape(x).to_vec();
    if xs.len() < 2 || stride == 0 {
        return Err(Error::InvalidShape(format!(
            "subsample_hw on {xs:?} with stride {stride}"
        )));
    }
    let r = xs.len();
    if xs[r - 2] % stride != 0 || xs[r - 1] % stride != 0 {
        return Err(Error::Geometry(format!(
            "grid {}x{} not divisible by stride {stride}",
            xs[r - 2],
            xs[r - 1]
        )));
    }
    let op = SubsampleOp {
        in_shape: xs.clone(),
        stride,
    };
    let data = tape.data(x);
    let out: Vec<f32> = op.index_map().into_iter().map(|i| data[i]).collect();
    let mut shape = xs;
    shape[r - 2] /= stride;
    shape[r - 1] /= stride;
    let value = Tensor::from_vec(&shape, out)?;
    Ok(tape.push(value, &[x], Box::new(op)))
}

struct UpsampleOp {
    outer: usize,
    h: usize,
    w: usize,
    factor: usize,
}

impl Op for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (h, w, f) = (self.h, self.w, self.factor);
        let (oh, ow) = (h * f, w * f);
        let mut dx = vec![0.0; self.outer * h * w];
        for o in 0..self.outer {
            for y in 0..oh {
                for x in 0..ow {
                    dx[(o * h + y / f) * w + x / f] += g[(o * oh + y) * ow + x];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Nearest-neighbour upsampling of the two trailing axes by `factor`.
pub fn upsample_nearest(tape: &mut Tape, x: Var, factor: usize) -> Result<Var> {
    tape.check(x)?;
    let xs = tape.shape(x).to_vec();
    if xs.len() < 2 || factor == 0 {
        return Err(Error::InvalidShape(format!("upsample_nearest on {xs:?} by {factor}")));
    }
    let r = xs.len();
    let (h, w) = (xs[r - 2], xs[r - 1]);
    let outer = tape.value(x).len() / (h * w);
    let data = tape.data(x);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(outer * oh * ow);
    for o in 0..outer {
        for y in 0..oh {
            let row = &data[(o * h + y / factor) * w..(o * h + y / factor + 1) * w];
            for x in 0..ow {
                out.push(row[x / factor]);
            }
        }
    }
    let mut shape = xs;
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let value = Tensor::from_vec(&shape, out)?;
    Ok(tape.push(value, &[x], Box::new(UpsampleOp { outer, h, w, factor })))
}

/// Splits `[N, C, H, W]` images into non-overlapping `P×P` patches
/// (row-major token order, features ordered channel, row, column) and
/// projects them with `proj: [C·P·P, d]`.
pub fn patch_embed2d(tape: &mut Tape, x: Var, patch: usize, proj: Dense<Var>) -> Result<Var> {
    tape.check(x)?;
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "patch_embed2d expects [N, C, H, W], got {xs:?}"
        )));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape(format!(
            "patch_embed2d: {h}x{w} image not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let r = tape.reshape(x, &[n, c, gh, patch, gw, patch])?;
    let p = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
    let flat = tape.reshape(p, &[n, gh * gw, c * patch * patch])?;
    linear(tape, flat, proj)
}

/// Pre-norm multi-head self-attention block over `[N, T, d]` tokens.
pub fn attention_block(tape: &mut Tape, x: Var, p: &AttentionBlockParams<Var>) -> Result<Var> {
    tape.check(x)?;
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(Error::InvalidShape(format!(
            "attention_block expects [N, T, d], got {xs:?}"
        )));
    }
    let (n, t, d) = (xs[0], xs[1], xs[2]);
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {} heads", p.heads)));
    }
    let (heads, dh) = (p.heads, d / p.heads);

    let h1 = tape.layer_norm(x, Some((p.norm1.gamma, p.norm1.beta)), 2, LN_EPS)?;
    let qkv = linear(tape, h1, p.qkv)?;
    let qkv = tape.reshape(qkv, &[n, t, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = tape.slice(qkv, 0, i, 1)?;
        *part = tape.reshape(s, &[n * heads, t, dh])?;
    }
    let [q, k, v] = parts;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, d])?;
    let out = linear(tape, ctx, p.proj)?;
    let x = tape.add(x, out)?;

    let h2 = tape.layer_norm(x, Some((p.norm2.gamma, p.norm2.beta)), 2, LN_EPS)?;
    let m = linear(tape, h2, p.fc1)?;
    let m = tape.gelu(m)?;
    let m = linear(tape, m, p.fc2)?;
    tape.add(x, m)
}

/// Concatenates each 2×2 token neighbourhood of an `h×w` grid in the order
/// (0,0), (0,1), (1,0), (1,1) and projects `4d → 2d`.
pub fn patch_merge(tape: &mut Tape, x: Var, grid: (usize, usize), proj: Dense<Var>) -> Result<Var> {
    tape.check(x)?;
    let xs = tape.shape(x).to_vec();
    let (h, w) = grid;
    if xs.len() != 3 || xs[1] != h * w {
        return Err(Error::InvalidShape(format!(
            "patch_merge: tokens {xs:?} do not match grid {h}x{w}"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!("patch_merge: odd grid {h}x{w}")));
    }
    let (n, d) = (xs[0], xs[2]);
    let r = tape.reshape(x, &[n, h / 2, 2, w / 2, 2, d])?;
    let p = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    let flat = tape.reshape(p, &[n, h * w / 4, 4 * d])?;
    linear(tape, flat, proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::Rng;
    use crate::tensor::Fill;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::new(shape, Fill::Uniform { rng, lo: -1.0, hi: 1.0 })
            .unwrap()
            .with_trainable(true)
    }

    fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let mut rng = Rng::new(seed);
        let w = Tensor::new(
            tape.shape(y),
            Fill::Uniform {
                rng: &mut rng,
                lo: -1.0,
                hi: 1.0,
            },
        )?;
        let wv = tape.constant(w);
        let p = tape.mul(y, wv)?;
        tape.sum_all(p)
    }

    fn impulse_kernel(c: usize, shape: [usize; 3]) -> Tensor {
        let ksz: usize = shape.iter().product();
        let mut data = vec![0.0; c * ksz];
        for ch in 0..c {
            data[ch * ksz + ksz / 2] = 1.0;
        }
        t(&[c, shape[0], shape[1], shape[2]], data)
    }

    #[test]
    fn linear_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], vec![1.0, 2.0]));
        let w = tape.leaf(&t(&[2, 1], vec![1.0, 1.0]));
        let b = tape.leaf(&t(&[1], vec![3.0]));
        let y = linear(&mut tape, x, Dense { weight: w, bias: b }).unwrap();
        assert_eq!(tape.data(y), &[6.0]);

        let eye = tape.leaf(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zb = tape.leaf(&t(&[2], vec![0.0, 0.0]));
        let y = linear(&mut tape, x, Dense { weight: eye, bias: zb }).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0]);
        assert!(matches!(
            linear(&mut tape, x, Dense { weight: w, bias: zb }),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dwconv_impulse_is_identity_and_ones_sum_to_nine() {
        let mut rng = Rng::new(1);
        let x = rand(&[1, 2, 3, 4, 5], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let zb = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        for shape in [[1, 3, 3], [3, 1, 1], [1, 5, 5], [5, 1, 1]] {
            let k = tape.leaf(&impulse_kernel(2, shape));
            let y = dwconv3d_single(&mut tape, xv, k, zb).unwrap();
            assert_eq!(tape.data(y), x.data());
        }
        let ones = Tensor::new(&[1, 1, 3, 3, 3], Fill::Constant(1.0)).unwrap();
        let ov = tape.leaf(&ones);
        let k = tape.leaf(&Tensor::new(&[1, 1, 3, 3], Fill::Constant(1.0)).unwrap());
        let b = tape.leaf(&t(&[1], vec![0.5]));
        let y = dwconv3d_single(&mut tape, ov, k, b).unwrap();
        assert_eq!(tape.data(y)[13], 9.5);
    }

    #[test]
    fn dwconv_rejects_even_and_malformed_kernels() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 1, 4, 4, 4]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[1]).unwrap());
        let even = tape.leaf(&Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        assert!(matches!(dwconv3d_single(&mut tape, x, even, b), Err(Error::Config(_))));
        let full = tape.leaf(&Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        assert!(dwconv3d_single(&mut tape, x, full, b).is_err());
    }

    #[test]
    fn cascade_of_impulses_is_identity() {
        let mut rng = Rng::new(2);
        let x = rand(&[2, 3, 4, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let pair = DepthwiseKernelPair {
            spatial: tape.leaf(&impulse_kernel(3, [1, 5, 5])),
            depth: tape.leaf(&impulse_kernel(3, [5, 1, 1])),
            bias_spatial: tape.leaf(&Tensor::zeros(&[3]).unwrap()),
            bias_depth: tape.leaf(&Tensor::zeros(&[3]).unwrap()),
            k: 5,
        };
        let y = dwconv_cascade(&mut tape, xv, pair).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn depthwise_never_mixes_channels() {
        let mut rng = Rng::new(3);
        let x = rand(&[1, 3, 3, 4, 4], &mut rng);
        let k = rand(&[3, 1, 3, 3], &mut rng);
        let b = rand(&[3], &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.leaf(x), tape.leaf(&k), tape.leaf(&b));
            let y = dwconv3d_single(&mut tape, xv, kv, bv).unwrap();
            tape.data(y).to_vec()
        };
        let base = run(&x);
        let mut x2 = x.clone();
        x2.data_mut()[48 + 5] += 1.0; // channel 1
        let moved = run(&x2);
        for (i, (a, b)) in base.iter().zip(&moved).enumerate() {
            if i / 48 != 1 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn pointwise_identity_and_channel_sum() {
        let mut rng = Rng::new(4);
        let x = rand(&[1, 2, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let eye = Dense {
            weight: tape.leaf(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])),
            bias: tape.leaf(&Tensor::zeros(&[2]).unwrap()),
        };
        let y = conv3d_pointwise(&mut tape, xv, eye).unwrap();
        assert_eq!(tape.data(y), x.data());
        let sum = Dense {
            weight: tape.leaf(&t(&[2, 1], vec![1.0, 1.0])),
            bias: tape.leaf(&Tensor::zeros(&[1]).unwrap()),
        };
        let y = conv3d_pointwise(&mut tape, xv, sum).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 3, 3]);
        for i in 0..18 {
            assert!((tape.data(y)[i] - (x.data()[i] + x.data()[18 + i])).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_embed_shapes_and_identity() {
        let mut rng = Rng::new(5);
        let img = rand(&[2, 1, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&img);
        let mut eye = vec![0.0; 16 * 16];
        for i in 0..16 {
            eye[i * 16 + i] = 1.0;
        }
        let proj = Dense {
            weight: tape.leaf(&t(&[16, 16], eye)),
            bias: tape.leaf(&Tensor::zeros(&[16]).unwrap()),
        };
        let y = patch_embed2d(&mut tape, xv, 4, proj).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 16]);
        assert_eq!(tape.data(y), img.data());

        let big = tape.leaf(&Tensor::zeros(&[1, 1, 32, 32]).unwrap());
        let proj = Dense {
            weight: tape.leaf(&Tensor::zeros(&[16, 8]).unwrap()),
            bias: tape.leaf(&Tensor::zeros(&[8]).unwrap()),
        };
        let y = patch_embed2d(&mut tape, big, 4, proj).unwrap();
        assert_eq!(tape.shape(y), &[1, 64, 8]);
        let odd = tape.leaf(&Tensor::zeros(&[1, 1, 30, 32]).unwrap());
        assert!(patch_embed2d(&mut tape, odd, 4, proj).is_err());
    }

    /// gamma1, beta1, qkv, proj, gamma2, beta2, fc1, fc2 (weights then biases).
    fn block_tensors(d: usize, hidden: usize, rng: &mut Rng, zero: bool) -> Vec<Tensor> {
        let shapes: [&[usize]; 12] = [
            &[d],
            &[d],
            &[d, 3 * d],
            &[3 * d],
            &[d, d],
            &[d],
            &[d],
            &[d],
            &[d, hidden],
            &[hidden],
            &[hidden, d],
            &[d],
        ];
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| match (zero, i) {
                (true, 0 | 6) => Tensor::new(s, Fill::Constant(1.0)).unwrap().with_trainable(true),
                (true, _) => Tensor::zeros(s).unwrap().with_trainable(true),
                _ => rand(s, rng),
            })
            .collect()
    }

    fn block_from(v: &[Var], heads: usize) -> AttentionBlockParams<Var> {
        AttentionBlockParams {
            norm1: LayerNormParams {
                gamma: v[0],
                beta: v[1],
            },
            qkv: Dense {
                weight: v[2],
                bias: v[3],
            },
            proj: Dense {
                weight: v[4],
                bias: v[5],
            },
            norm2: LayerNormParams {
                gamma: v[6],
                beta: v[7],
            },
            fc1: Dense {
                weight: v[8],
                bias: v[9],
            },
            fc2: Dense {
                weight: v[10],
                bias: v[11],
            },
            heads,
        }
    }

    #[test]
    fn attention_zero_weights_is_residual() {
        let mut rng = Rng::new(6);
        let x = rand(&[2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let vars: Vec<Var> = block_tensors(4, 8, &mut rng, true)
            .iter()
            .map(|t| tape.leaf(t))
            .collect();
        let p = block_from(&vars, 2);
        let y = attention_block(&mut tape, xv, &p).unwrap();
        assert_eq!(tape.data(y), x.data());
        let bad = AttentionBlockParams { heads: 3, ..p };
        assert!(matches!(attention_block(&mut tape, xv, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn patch_merge_constant_grid() {
        let d = 3;
        let tok = [0.5f32, -1.0, 2.0];
        let x = t(&[1, 4, d], tok.iter().copied().cycle().take(4 * d).collect());
        let mut avg = vec![0.0; 4 * d * 2 * d];
        for n in 0..4 {
            for j in 0..d {
                // output j and j+d both average feature j
                avg[(n * d + j) * 2 * d + j] = 0.25;
                avg[(n * d + j) * 2 * d + j + d] = 0.25;
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let proj = Dense {
            weight: tape.leaf(&t(&[4 * d, 2 * d], avg)),
            bias: tape.leaf(&Tensor::zeros(&[2 * d]).unwrap()),
        };
        let y = patch_merge(&mut tape, xv, (2, 2), proj).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2 * d]);
        assert_eq!(tape.data(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        let odd = tape.leaf(&Tensor::zeros(&[1, 3, d]).unwrap());
        assert!(patch_merge(&mut tape, odd, (1, 3), proj).is_err());
    }

    #[test]
    fn subsample_and_upsample() {
        let x = t(&[1, 1, 1, 2, 4], (0..8).map(|v| v as f32).collect());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = subsample_hw(&mut tape, xv, 2).unwrap();
        assert_eq!(tape.data(s), &[0.0, 2.0]);
        let u = upsample_nearest(&mut tape, s, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 1, 1, 2, 4]);
        assert_eq!(tape.data(u), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0]);
        let odd = tape.leaf(&Tensor::zeros(&[1, 3, 3]).unwrap());
        assert!(matches!(subsample_hw(&mut tape, odd, 2), Err(Error::Geometry(_))));
    }

    #[test]
    fn gradients_of_fused_ops() {
        let mut rng = Rng::new(7);
        let pt = vec![rand(&[3, 4], &mut rng), rand(&[4, 2], &mut rng), rand(&[2], &mut rng)];
        let e = grad_check(
            |tp, v| {
                let y = linear(
                    tp,
                    v[0],
                    Dense {
                        weight: v[1],
                        bias: v[2],
                    },
                )?;
                weighted(tp, y, 1)
            },
            &pt,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-2, "linear {e}");

        for kshape in [[2usize, 1, 3, 3], [2, 3, 1, 1]] {
            let pt = vec![
                rand(&[1, 2, 3, 4, 4], &mut rng),
                rand(&kshape, &mut rng),
                rand(&[2], &mut rng),
            ];
            let e = grad_check(
                |tp, v| {
                    let y = dwconv3d_single(tp, v[0], v[1], v[2])?;
                    weighted(tp, y, 2)
                },
                &pt,
                1e-3,
            )
            .unwrap();
            assert!(e < 1e-2, "dwconv {kshape:?} {e}");
        }

        let pt = vec![rand(&[1, 2, 2, 4, 4], &mut rng)];
        let e = grad_check(
            |tp, v| {
                let s = subsample_hw(tp, v[0], 2)?;
                let u = upsample_nearest(tp, s, 2)?;
                weighted(tp, u, 3)
            },
            &pt,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-2, "resample {e}");
    }

    #[test]
    fn gradients_of_composite_ops() {
        let mut rng = Rng::new(8);
        let pt = vec![
            rand(&[1, 2, 2, 3, 3], &mut rng),
            rand(&[2, 3], &mut rng),
            rand(&[3], &mut rng),
        ];
        let e = grad_check(
            |tp, v| {
                let y = conv3d_pointwise(
                    tp,
                    v[0],
                    Dense {
                        weight: v[1],
                        bias: v[2],
                    },
                )?;
                weighted(tp, y, 4)
            },
            &pt,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-2, "pointwise {e}");

        let pt = vec![
            rand(&[1, 4, 3], &mut rng),
            rand(&[12, 6], &mut rng),
            rand(&[6], &mut rng),
        ];
        let e = grad_check(
            |tp, v| {
                let y = patch_merge(
                    tp,
                    v[0],
                    (2, 2),
                    Dense {
                        weight: v[1],
                        bias: v[2],
                    },
                )?;
                weighted(tp, y, 5)
            },
            &pt,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-2, "merge {e}");

        let mut pt = vec![rand(&[1, 3, 4], &mut rng)];
        pt.extend(block_tensors(4, 8, &mut rng, false));
        let e = grad_check(
            |tp, v| {
                let ps = block_from(&v[1..], 2);
                let y = attention_block(tp, v[0], &ps)?;
                weighted(tp, y, 6)
            },
            &pt,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-2, "attention {e}");
    }
}
