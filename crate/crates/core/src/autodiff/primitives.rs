//! The primitive catalog. Shapes are explicit: apart from scalar scaling
//! there is no implicit broadcasting.

use super::kernels::{axis_split, gemm_nn, gemm_nt, gemm_tn, inverse_permutation, permute, reduce_index_map, strides};
use super::{BackwardCtx, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{check_shape, Tensor};

/// `tanh`-approximation constant √(2/π) used by [`Primitive::Gelu`].
pub const GELU_COEFF: f32 = 0.797_884_560_8;
const GELU_CUBIC: f32 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Hadamard,
    Scale(f32),
    /// Rank-2 `[m,k]·[k,n]` or batched rank-3 `[b,m,k]·[b,k,n]`.
    MatMul,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum(Vec<usize>),
    Mean(Vec<usize>),
    Relu,
    Gelu,
    Softmax {
        axis: usize,
    },
    /// Inputs `[x]` or `[x, gamma, beta]` with `gamma`, `beta` of shape `[shape[axis]]`.
    LayerNorm {
        axis: usize,
        eps: f32,
    },
    /// Zero padding `(before, after)` per axis.
    Pad(Vec<(usize, usize)>),
    /// Gathers rows of a `[V, d]` table.
    EmbedLookup(Vec<usize>),
    /// Elementwise maximum; ties route the gradient to the first input.
    Maximum,
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Hadamard => "hadamard",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Reshape(_) => "reshape",
            Primitive::Permute(_) => "permute",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum(_) => "sum",
            Primitive::Mean(_) => "mean",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Pad(_) => "pad",
            Primitive::EmbedLookup(_) => "embed_lookup",
            Primitive::Maximum => "maximum",
        }
    }
}

fn arity(p: &Primitive, inputs: &[Var]) -> Result<()> {
    let ok = match p {
        Primitive::Add | Primitive::Sub | Primitive::Hadamard | Primitive::MatMul | Primitive::Maximum => {
            inputs.len() == 2
        }
        Primitive::Concat { .. } => !inputs.is_empty(),
        Primitive::LayerNorm { .. } => inputs.len() == 1 || inputs.len() == 3,
        _ => inputs.len() == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{} called with {} inputs",
            p.name(),
            inputs.len()
        )))
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { op, axis, rank })
    } else {
        Ok(())
    }
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_COEFF * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_COEFF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEFF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

// ---- op structs -----------------------------------------------------------

struct AddOp;
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        ctx.needs_grad.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct SubOp;
impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![
            ctx.needs_grad[0].then(|| g.to_vec()),
            ctx.needs_grad[1].then(|| g.iter().map(|v| -v).collect()),
        ]
    }
}

struct HadamardOp;
impl Op for HadamardOp {
    fn name(&self) -> &'static str {
        "hadamard"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            ctx.needs_grad[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
            ctx.needs_grad[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
        ]
    }
}

struct MaximumOp;
impl Op for MaximumOp {
    fn name(&self) -> &'static str {
        "maximum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            ctx.needs_grad[0].then(|| {
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| if a >= b { *g } else { 0.0 })
                    .collect()
            }),
            ctx.needs_grad[1].then(|| {
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| if a >= b { 0.0 } else { *g })
                    .collect()
            }),
        ]
    }
}

struct ScaleOp(f32);
impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct MatMulOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}
impl Op for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (m, k, n) = (self.m, self.k, self.n);
        let da = ctx.needs_grad[0].then(|| {
            let mut da = vec![0.0; self.batch * m * k];
            for bi in 0..self.batch {
                gemm_nt(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut da[bi * m * k..(bi + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            da
        });
        let db = ctx.needs_grad[1].then(|| {
            let mut db = vec![0.0; self.batch * k * n];
            for bi in 0..self.batch {
                gemm_tn(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut db[bi * k * n..(bi + 1) * k * n],
                    k,
                    m,
                    n,
                );
            }
            db
        });
        vec![da, db]
    }
}

struct ReshapeOp;
impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.to_vec())]
    }
}

struct PermuteOp {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}
impl Op for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(permute(g, &self.out_shape, &self.inverse))]
    }
}

struct ConcatOp {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}
impl Op for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let total: usize = self.extents.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.extents.len());
        for (i, &e) in self.extents.iter().enumerate() {
            if ctx.needs_grad[i] {
                let mut gi = Vec::with_capacity(self.outer * e * self.inner);
                for o in 0..self.outer {
                    let start = (o * total + offset) * self.inner;
                    gi.extend_from_slice(&g[start..start + e * self.inner]);
                }
                out.push(Some(gi));
            } else {
                out.push(None);
            }
            offset += e;
        }
        out
    }
}

struct SliceOp {
    outer: usize,
    extent: usize,
    inner: usize,
    start: usize,
    len: usize,
}
impl Op for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut gi = vec![0.0; self.outer * self.extent * self.inner];
        let chunk = self.len * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.extent + self.start) * self.inner;
            gi[dst..dst + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
        }
        vec![Some(gi)]
    }
}

struct ReduceOp {
    map: Vec<usize>,
    scale: f32,
}
impl Op for ReduceOp {
    fn name(&self) -> &'static str {
        "reduce"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(self.map.iter().map(|&j| g[j] * self.scale).collect())]
    }
}

struct ReluOp;
impl Op for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let x = ctx.inputs[0].data();
        vec![Some(
            g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
        )]
    }
}

struct GeluOp;
impl Op for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let x = ctx.inputs[0].data();
        vec![Some(g.iter().zip(x).map(|(g, x)| g * gelu_grad_scalar(*x)).collect())]
    }
}

struct SoftmaxOp {
    outer: usize,
    n: usize,
    inner: usize,
}
impl Op for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let y = ctx.output.data();
        let mut dx = vec![0.0; y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.n * self.inner + i;
                let mut dot = 0.0f32;
                for j in 0..self.n {
                    let p = base + j * self.inner;
                    dot += g[p] * y[p];
                }
                for j in 0..self.n {
                    let p = base + j * self.inner;
                    dx[p] = y[p] * (g[p] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

struct LayerNormOp {
    outer: usize,
    n: usize,
    inner: usize,
    xhat: Vec<f32>,
    rstd: Vec<f32>,
    affine: bool,
}
impl Op for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (outer, n, inner) = (self.outer, self.n, self.inner);
        let gamma = self.affine.then(|| ctx.inputs[1].data());
        let mut dx = vec![0.0; g.len()];
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        let inv_n = 1.0 / n as f32;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let r = self.rstd[o * inner + i];
                let mut mean_dxhat = 0.0f32;
                let mut mean_dxhat_xhat = 0.0f32;
                for j in 0..n {
                    let p = base + j * inner;
                    let dxh = g[p] * gamma.map_or(1.0, |gm| gm[j]);
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * self.xhat[p];
                    dgamma[j] += g[p] * self.xhat[p];
                    dbeta[j] += g[p];
                }
                mean_dxhat *= inv_n;
                mean_dxhat_xhat *= inv_n;
                for j in 0..n {
                    let p = base + j * inner;
                    let dxh = g[p] * gamma.map_or(1.0, |gm| gm[j]);
                    dx[p] = r * (dxh - mean_dxhat - self.xhat[p] * mean_dxhat_xhat);
                }
            }
        }
        if self.affine {
            vec![
                ctx.needs_grad[0].then_some(dx),
                ctx.needs_grad[1].then_some(dgamma),
                ctx.needs_grad[2].then_some(dbeta),
            ]
        } else {
            vec![Some(dx)]
        }
    }
}

struct PadOp {
    /// Output flat index of each input element.
    map: Vec<usize>,
}
impl Op for PadOp {
    fn name(&self) -> &'static str {
        "pad"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(self.map.iter().map(|&j| g[j]).collect())]
    }
}

struct EmbedLookupOp {
    indices: Vec<usize>,
    d: usize,
}
impl Op for EmbedLookupOp {
    fn name(&self) -> &'static str {
        "embed_lookup"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dt = vec![0.0; ctx.inputs[0].len()];
        for (row, &ix) in self.indices.iter().enumerate() {
            let src = &g[row * self.d..(row + 1) * self.d];
            dt[ix * self.d..(ix + 1) * self.d]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        }
        vec![Some(dt)]
    }
}

// ---- forward implementations -------------------------------------------

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shape preserved")
}

fn map(a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_vec(a.shape(), a.data().iter().map(|x| f(*x)).collect()).expect("shape preserved")
}

fn validate_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        check_axis(op, a, rank)?;
        if axes[..i].contains(&a) {
            return Err(Error::Contract(format!("{op}: repeated axis {a}")));
        }
    }
    Ok(())
}

impl Tape {
    /// Applies a primitive to recorded inputs.
    pub fn apply(&mut self, p: Primitive, inputs: &[Var]) -> Result<Var> {
        arity(&p, inputs)?;
        for &v in inputs {
            self.check(v)?;
        }
        let name = p.name();
        let x = self.value(inputs[0]);
        let (out, op): (Tensor, Box<dyn Op>) = match p {
            Primitive::Add | Primitive::Sub | Primitive::Hadamard | Primitive::Maximum => {
                let y = self.value(inputs[1]);
                same_shape(name, x, y)?;
                match p {
                    Primitive::Add => (zip_map(x, y, |a, b| a + b), Box::new(AddOp)),
                    Primitive::Sub => (zip_map(x, y, |a, b| a - b), Box::new(SubOp)),
                    Primitive::Hadamard => (zip_map(x, y, |a, b| a * b), Box::new(HadamardOp)),
                    _ => (zip_map(x, y, f32::max), Box::new(MaximumOp)),
                }
            }
            Primitive::Scale(s) => (map(x, |a| a * s), Box::new(ScaleOp(s))),
            Primitive::MatMul => {
                let y = self.value(inputs[1]);
                let (xs, ys) = (x.shape(), y.shape());
                let (batch, m, k, k2, n) = match (xs.len(), ys.len()) {
                    (2, 2) => (1, xs[0], xs[1], ys[0], ys[1]),
                    (3, 3) if xs[0] == ys[0] => (xs[0], xs[1], xs[2], ys[1], ys[2]),
                    _ => return Err(Error::mismatch(name, xs, ys)),
                };
                if k != k2 {
                    return Err(Error::mismatch(name, xs, ys));
                }
                let mut c = vec![0.0; batch * m * n];
                for bi in 0..batch {
                    gemm_nn(
                        &x.data()[bi * m * k..(bi + 1) * m * k],
                        &y.data()[bi * k * n..(bi + 1) * k * n],
                        &mut c[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                let shape = if xs.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
                (Tensor::from_vec(&shape, c)?, Box::new(MatMulOp { batch, m, k, n }))
            }
            Primitive::Reshape(shape) => {
                let n = check_shape(&shape)?;
                if n != x.len() {
                    return Err(Error::mismatch(name, x.shape(), &shape));
                }
                (Tensor::from_vec(&shape, x.data().to_vec())?, Box::new(ReshapeOp))
            }
            Primitive::Permute(perm) => {
                let rank = x.rank();
                let mut seen = vec![false; rank];
                if perm.len() != rank {
                    return Err(Error::mismatch(name, x.shape(), &perm));
                }
                for &a in &perm {
                    check_axis(name, a, rank)?;
                    if seen[a] {
                        return Err(Error::Contract(format!("permute: repeated axis {a}")));
                    }
                    seen[a] = true;
                }
                let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
                let data = permute(x.data(), x.shape(), &perm);
                (
                    Tensor::from_vec(&out_shape, data)?,
                    Box::new(PermuteOp {
                        out_shape,
                        inverse: inverse_permutation(&perm),
                    }),
                )
            }
            Primitive::Concat { axis } => {
                let first = x.shape().to_vec();
                check_axis(name, axis, first.len())?;
                let mut extents = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let s = self.shape(v);
                    let compatible = s.len() == first.len()
                        && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                    if !compatible {
                        return Err(Error::mismatch(name, &first, s));
                    }
                    extents.push(s[axis]);
                }
                let (outer, _, inner) = axis_split(&first, axis);
                let total: usize = extents.iter().sum();
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for (&v, &e) in inputs.iter().zip(&extents) {
                        let d = self.data(v);
                        data.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
                    }
                }
                let mut shape = first;
                shape[axis] = total;
                (
                    Tensor::from_vec(&shape, data)?,
                    Box::new(ConcatOp { outer, inner, extents }),
                )
            }
            Primitive::Slice { axis, start, len } => {
                check_axis(name, axis, x.rank())?;
                let (outer, extent, inner) = axis_split(x.shape(), axis);
                if len == 0 || start + len > extent {
                    return Err(Error::InvalidShape(format!(
                        "slice [{start}, {}) out of range for extent {extent}",
                        start + len
                    )));
                }
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let s = (o * extent + start) * inner;
                    data.extend_from_slice(&x.data()[s..s + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = len;
                (
                    Tensor::from_vec(&shape, data)?,
                    Box::new(SliceOp {
                        outer,
                        extent,
                        inner,
                        start,
                        len,
                    }),
                )
            }
            Primitive::Sum(ref axes) | Primitive::Mean(ref axes) => {
                validate_axes(name, axes, x.rank())?;
                let (idx, out_shape) = reduce_index_map(x.shape(), axes);
                let out_n: usize = out_shape.iter().product();
                let mut acc = vec![0.0f64; out_n];
                for (v, &j) in x.data().iter().zip(&idx) {
                    acc[j] += f64::from(*v);
                }
                let count = (x.len() / out_n) as f64;
                let scale = if matches!(p, Primitive::Mean(_)) {
                    1.0 / count
                } else {
                    1.0
                };
                let data = acc.iter().map(|a| (a * scale) as f32).collect();
                (
                    Tensor::from_vec(&out_shape, data)?,
                    Box::new(ReduceOp {
                        map: idx,
                        scale: scale as f32,
                    }),
                )
            }
            Primitive::Relu => (map(x, |a| a.max(0.0)), Box::new(ReluOp)),
            Primitive::Gelu => (map(x, gelu_scalar), Box::new(GeluOp)),
            Primitive::Softmax { axis } => {
                check_axis(name, axis, x.rank())?;
                let (outer, n, inner) = axis_split(x.shape(), axis);
                let src = x.data();
                let mut y = vec![0.0; src.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut mx = f32::NEG_INFINITY;
                        for j in 0..n {
                            mx = mx.max(src[base + j * inner]);
                        }
                        let mut s = 0.0f32;
                        for j in 0..n {
                            let e = (src[base + j * inner] - mx).exp();
                            y[base + j * inner] = e;
                            s += e;
                        }
                        for j in 0..n {
                            y[base + j * inner] /= s;
                        }
                    }
                }
                (Tensor::from_vec(x.shape(), y)?, Box::new(SoftmaxOp { outer, n, inner }))
            }
            Primitive::LayerNorm { axis, eps } => {
                check_axis(name, axis, x.rank())?;
                let (outer, n, inner) = axis_split(x.shape(), axis);
                let affine = inputs.len() == 3;
                let (gamma, beta) = if affine {
                    let g = self.value(inputs[1]);
                    let b = self.value(inputs[2]);
                    if g.shape() != [n] || b.shape() != [n] {
                        return Err(Error::mismatch(name, &[n], g.shape()));
                    }
                    (Some(g.data()), Some(b.data()))
                } else {
                    (None, None)
                };
                let src = x.data();
                let mut xhat = vec![0.0; src.len()];
                let mut y = vec![0.0; src.len()];
                let mut rstd = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut mean = 0.0f64;
                        for j in 0..n {
                            mean += f64::from(src[base + j * inner]);
                        }
                        mean /= n as f64;
                        let mut var = 0.0f64;
                        for j in 0..n {
                            let d = f64::from(src[base + j * inner]) - mean;
                            var += d * d;
                        }
                        var /= n as f64;
                        let r = (1.0 / (var + f64::from(eps)).sqrt()) as f32;
                        rstd[o * inner + i] = r;
                        for j in 0..n {
                            let p = base + j * inner;
                            let h = (src[p] - mean as f32) * r;
                            xhat[p] = h;
                            y[p] = match (gamma, beta) {
                                (Some(g), Some(b)) => h * g[j] + b[j],
                                _ => h,
                            };
                        }
                    }
                }
                (
                    Tensor::from_vec(x.shape(), y)?,
                    Box::new(LayerNormOp {
                        outer,
                        n,
                        inner,
                        xhat,
                        rstd,
                        affine,
                    }),
                )
            }
            Primitive::Pad(pads) => {
                if pads.len() != x.rank() {
                    return Err(Error::mismatch(name, x.shape(), &vec![0; pads.len()]));
                }
                let out_shape: Vec<usize> = x.shape().iter().zip(&pads).map(|(d, (b, a))| d + b + a).collect();
                let os = strides(&out_shape);
                let offset: usize = pads.iter().zip(&os).map(|((b, _), s)| b * s).sum();
                let xs = strides(x.shape());
                let mapv: Vec<usize> = (0..x.len())
                    .map(|flat| {
                        let mut rem = flat;
                        let mut off = offset;
                        for (a, s) in xs.iter().enumerate() {
                            let ia = rem / s;
                            rem %= s;
                            off += ia * os[a];
                        }
                        off
                    })
                    .collect();
                let mut data = vec![0.0; out_shape.iter().product()];
                for (v, &j) in x.data().iter().zip(&mapv) {
                    data[j] = *v;
                }
                (Tensor::from_vec(&out_shape, data)?, Box::new(PadOp { map: mapv }))
            }
            Primitive::EmbedLookup(indices) => {
                if x.rank() != 2 {
                    return Err(Error::InvalidShape(format!(
                        "embed_lookup table must be rank 2, got {:?}",
                        x.shape()
                    )));
                }
                let (v, d) = (x.shape()[0], x.shape()[1]);
                if indices.is_empty() {
                    return Err(Error::InvalidShape("embed_lookup with no indices".into()));
                }
                let mut data = Vec::with_capacity(indices.len() * d);
                for &ix in &indices {
                    if ix >= v {
                        return Err(Error::Data(format!("embedding index {ix} >= {v}")));
                    }
                    data.extend_from_slice(&x.data()[ix * d..(ix + 1) * d]);
                }
                (
                    Tensor::from_vec(&[indices.len(), d], data)?,
                    Box::new(EmbedLookupOp { indices, d }),
                )
            }
        };
        Ok(self.push(out, inputs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Hadamard, &[a, b])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Maximum, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute(perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Sum(axes.to_vec()), &[a])
    }

    /// Sum over every axis, giving shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Mean(axes.to_vec()), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, affine: Option<(Var, Var)>, axis: usize, eps: f32) -> Result<Var> {
        match affine {
            Some((g, b)) => self.apply(Primitive::LayerNorm { axis, eps }, &[a, g, b]),
            None => self.apply(Primitive::LayerNorm { axis, eps }, &[a]),
        }
    }

    pub fn pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Result<Var> {
        self.apply(Primitive::Pad(pads.to_vec()), &[a])
    }

    pub fn embed_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Primitive::EmbedLookup(indices.to_vec()), &[table])
    }
}
