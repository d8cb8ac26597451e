//! Discrete Fourier transforms and the learnable spectral filter branch.
//!
//! Conventions: the forward transform is unnormalized,
//! `f[k] = Σₙ x[n]·e^{−j2πkn/N}`, and the inverse carries the `1/N` factor
//! (`1/(D·H·W)` in 3D). A 3D transform is the composition of 1D transforms
//! along W, then H, then D. Power-of-two lengths use an iterative radix-2
//! Cooley-Tukey kernel; other lengths use the direct O(N²) sum.
//!
//! Transforms run in `f64`; tensors crossing into and out of the filter are
//! `f32`.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::autodiff::{BackwardCtx, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{check_shape, Tensor};

/// Paired real/imaginary arrays of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexField {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if re.len() != n || im.len() != n {
            return Err(Error::InvalidShape(format!(
                "complex field {shape:?} needs {n} values, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexField {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![0.0; n], vec![0.0; n])
    }

    pub fn from_real(t: &Tensor) -> Self {
        ComplexField {
            shape: t.shape().to_vec(),
            re: t.data().iter().map(|&v| f64::from(v)).collect(),
            im: vec![0.0; t.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn real_part(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.re.iter().map(|&v| v as f32).collect()).expect("shape already validated")
    }

    /// Σ |z|² over all entries.
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }

    pub fn max_abs_diff(&self, other: &ComplexField) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.re
            .iter()
            .zip(&self.im)
            .zip(other.re.iter().zip(&other.im))
            .map(|((a, b), (c, d))| (a - c).abs().max((b - d).abs()))
            .fold(0.0, f64::max)
    }
}

fn require_rank(op: &'static str, f: &ComplexField, rank: usize) -> Result<()> {
    if f.shape.len() != rank {
        return Err(Error::InvalidShape(format!(
            "{op} expects a rank-{rank} field, got {:?}",
            f.shape
        )));
    }
    Ok(())
}

/// Direct O(N²) transform of one line. Phases are reduced modulo N before
/// evaluating the exponential.
fn dft_direct(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for m in 0..n {
            let phase = sign * TAU * ((k * m) % n) as f64 / n as f64;
            let (s, c) = phase.sin_cos();
            sr += re[m] * c - im[m] * s;
            si += re[m] * s + im[m] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        out_re.iter_mut().for_each(|v| *v *= inv);
        out_im.iter_mut().for_each(|v| *v *= inv);
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// Eq.-style direct 1D DFT, `f[k] = Σₙ x[n]·e^{−j2πkn/N}`.
pub fn dft1d_reference(x: &ComplexField) -> Result<ComplexField> {
    require_rank("dft1d_reference", x, 1)?;
    let mut out = x.clone();
    dft_direct(&mut out.re, &mut out.im, false);
    Ok(out)
}

/// Direct 1D inverse, `x[n] = (1/N)·Σₖ f[k]·e^{+j2πkn/N}`.
pub fn idft1d_reference(f: &ComplexField) -> Result<ComplexField> {
    require_rank("idft1d_reference", f, 1)?;
    let mut out = f.clone();
    dft_direct(&mut out.re, &mut out.im, true);
    Ok(out)
}

/// Precomputed 1D transform for one length.
#[derive(Debug, Clone)]
enum LinePlan {
    Radix2 {
        n: usize,
        bitrev: Vec<usize>,
        /// e^{−j2πk/N} for k < N/2.
        tw_re: Vec<f64>,
        tw_im: Vec<f64>,
    },
    Direct {
        n: usize,
    },
}

impl LinePlan {
    fn new(n: usize) -> Self {
        if n.is_power_of_two() && n > 1 {
            let bits = n.trailing_zeros();
            let bitrev = (0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect();
            let (tw_re, tw_im) = (0..n / 2)
                .map(|k| {
                    let (s, c) = (-TAU * k as f64 / n as f64).sin_cos();
                    (c, s)
                })
                .unzip();
            LinePlan::Radix2 {
                n,
                bitrev,
                tw_re,
                tw_im,
            }
        } else {
            LinePlan::Direct { n }
        }
    }

    fn len(&self) -> usize {
        match self {
            LinePlan::Radix2 { n, .. } | LinePlan::Direct { n } => *n,
        }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        match self {
            LinePlan::Direct { .. } => dft_direct(re, im, inverse),
            LinePlan::Radix2 {
                n,
                bitrev,
                tw_re,
                tw_im,
            } => {
                let n = *n;
                for i in 0..n {
                    let j = bitrev[i];
                    if j > i {
                        re.swap(i, j);
                        im.swap(i, j);
                    }
                }
                let conj = if inverse { -1.0 } else { 1.0 };
                let mut half = 1;
                while half < n {
                    let step = n / (2 * half);
                    for start in (0..n).step_by(2 * half) {
                        for k in 0..half {
                            let wr = tw_re[k * step];
                            let wi = conj * tw_im[k * step];
                            let (a, b) = (start + k, start + k + half);
                            let tr = wr * re[b] - wi * im[b];
                            let ti = wr * im[b] + wi * re[b];
                            re[b] = re[a] - tr;
                            im[b] = im[a] - ti;
                            re[a] += tr;
                            im[a] += ti;
                        }
                    }
                    half *= 2;
                }
                if inverse {
                    let inv = 1.0 / n as f64;
                    re.iter_mut().for_each(|v| *v *= inv);
                    im.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
    }
}

/// Fast 1D transform (radix-2 when N is a power of two, direct otherwise).
pub fn fft1d(x: &ComplexField) -> Result<ComplexField> {
    require_rank("fft1d", x, 1)?;
    let mut out = x.clone();
    LinePlan::new(x.len()).run(&mut out.re, &mut out.im, false);
    Ok(out)
}

pub fn ifft1d(f: &ComplexField) -> Result<ComplexField> {
    require_rank("ifft1d", f, 1)?;
    let mut out = f.clone();
    LinePlan::new(f.len()).run(&mut out.re, &mut out.im, true);
    Ok(out)
}

/// Reusable plan for `[D, H, W]` transforms.
#[derive(Debug, Clone)]
pub struct Fft3dPlan {
    dims: [usize; 3],
    lines: [LinePlan; 3],
}

impl Fft3dPlan {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        check_shape(&[d, h, w])?;
        Ok(Fft3dPlan {
            dims: [d, h, w],
            lines: [LinePlan::new(d), LinePlan::new(h), LinePlan::new(w)],
        })
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Transforms one contiguous `[D, H, W]` slab in place.
    pub fn run(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let [d, h, w] = self.dims;
        debug_assert_eq!(re.len(), d * h * w);
        // W: contiguous lines.
        let pw = &self.lines[2];
        for line in 0..d * h {
            let s = line * w;
            pw.run(&mut re[s..s + w], &mut im[s..s + w], inverse);
        }
        // H then D: strided lines gathered into scratch.
        for (axis, stride, count) in [(1usize, w, h), (0usize, h * w, d)] {
            let plan = &self.lines[axis];
            if plan.len() == 1 {
                continue;
            }
            let mut br = vec![0.0; count];
            let mut bi = vec![0.0; count];
            let outer_stride = stride * count;
            for outer in 0..(d * h * w) / outer_stride {
                for inner in 0..stride {
                    let base = outer * outer_stride + inner;
                    for i in 0..count {
                        br[i] = re[base + i * stride];
                        bi[i] = im[base + i * stride];
                    }
                    plan.run(&mut br, &mut bi, inverse);
                    for i in 0..count {
                        re[base + i * stride] = br[i];
                        im[base + i * stride] = bi[i];
                    }
                }
            }
        }
    }
}

/// 3D transform of a `[D, H, W]` field.
pub fn fft3d(x: &ComplexField) -> Result<ComplexField> {
    require_rank("fft3d", x, 3)?;
    let plan = Fft3dPlan::new(x.shape[0], x.shape[1], x.shape[2])?;
    let mut out = x.clone();
    plan.run(&mut out.re, &mut out.im, false);
    Ok(out)
}

/// Inverse 3D transform including the `1/(D·H·W)` factor.
pub fn ifft3d(f: &ComplexField) -> Result<ComplexField> {
    require_rank("ifft3d", f, 3)?;
    let plan = Fft3dPlan::new(f.shape[0], f.shape[1], f.shape[2])?;
    let mut out = f.clone();
    plan.run(&mut out.re, &mut out.im, true);
    Ok(out)
}

/// Learnable per-channel complex weight and optional complex bias.
///
/// Each handle refers to a real tensor of shape `[C', 2]` holding
/// `(re, im)` pairs, one per bottleneck channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralWeights<T> {
    pub w: T,
    pub b: Option<T>,
}

impl<T: Copy> SpectralWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> SpectralWeights<U> {
        SpectralWeights {
            w: f(self.w),
            b: self.b.map(f),
        }
    }

    pub fn bias_enabled(&self) -> bool {
        self.b.is_some()
    }
}

struct SpectralFilterOp {
    plan: Fft3dPlan,
    batch: usize,
    channels: usize,
    /// Forward spectra of the input slabs, `(re, im)` per slab.
    spectra: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Op for SpectralFilterOp {
    fn name(&self) -> &'static str {
        "spectral_filter"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let vol = self.plan.volume();
        let inv_n = 1.0 / vol as f64;
        let w = ctx.inputs[1].data();
        let has_bias = ctx.inputs.len() == 3;
        let need_x = ctx.needs_grad[0];
        // Per slab: Ĝ = FFT(g)/N, then parameter sums and the input gradient
        // Re(IFFT(conj(w)·FFT(g))).
        let per_slab: Vec<([f64; 4], Option<Vec<f32>>)> = (0..self.batch * self.channels)
            .into_par_iter()
            .map(|slab| {
                let c = slab % self.channels;
                let mut gr: Vec<f64> = g[slab * vol..(slab + 1) * vol].iter().map(|&v| f64::from(v)).collect();
                let mut gi = vec![0.0; vol];
                self.plan.run(&mut gr, &mut gi, false);
                let (xr, xi) = &self.spectra[slab];
                let mut sums = [0.0f64; 4];
                for k in 0..vol {
                    let (hr, hi) = (gr[k] * inv_n, gi[k] * inv_n);
                    sums[0] += hr * xr[k] + hi * xi[k];
                    sums[1] += hi * xr[k] - hr * xi[k];
                    sums[2] += hr;
                    sums[3] += hi;
                }
                let dx = need_x.then(|| {
                    let (wr, wi) = (f64::from(w[2 * c]), f64::from(w[2 * c + 1]));
                    for k in 0..vol {
                        let (a, b) = (gr[k], gi[k]);
                        gr[k] = wr * a + wi * b;
                        gi[k] = wr * b - wi * a;
                    }
                    self.plan.run(&mut gr, &mut gi, true);
                    gr.iter().map(|&v| v as f32).collect()
                });
                (sums, dx)
            })
            .collect();

        let mut dw = vec![0.0f64; 2 * self.channels];
        let mut db = vec![0.0f64; 2 * self.channels];
        let mut dx = need_x.then(|| Vec::with_capacity(g.len()));
        for (slab, (sums, dxs)) in per_slab.into_iter().enumerate() {
            let c = slab % self.channels;
            dw[2 * c] += sums[0];
            dw[2 * c + 1] += sums[1];
            db[2 * c] += sums[2];
            db[2 * c + 1] += sums[3];
            if let (Some(acc), Some(d)) = (dx.as_mut(), dxs) {
                acc.extend_from_slice(&d);
            }
        }
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        let mut out = vec![dx, ctx.needs_grad[1].then(|| to32(dw))];
        if has_bias {
            out.push(ctx.needs_grad[2].then(|| to32(db)));
        }
        out
    }
}

/// Applies `Re(IFFT₃(w[c] ⊙ FFT₃(slab) + b[c]))` to every `(batch, channel)`
/// slab of `xp: [B, C', D, H, W]`. `w` and `b` are `[C', 2]` real tensors.
/// The bias is added to every frequency bin.
pub fn spectral_filter(tape: &mut Tape, xp: Var, weights: SpectralWeights<Var>) -> Result<Var> {
    let shape = tape.shape(xp).to_vec();
    if shape.len() != 5 {
        return Err(Error::InvalidShape(format!(
            "spectral_filter expects [B, C, D, H, W], got {shape:?}"
        )));
    }
    let (batch, channels) = (shape[0], shape[1]);
    let expect = [channels, 2];
    if tape.shape(weights.w) != expect {
        return Err(Error::mismatch("spectral_filter", &expect, tape.shape(weights.w)));
    }
    if let Some(b) = weights.b {
        if tape.shape(b) != expect {
            return Err(Error::mismatch("spectral_filter", &expect, tape.shape(b)));
        }
    }
    let plan = Fft3dPlan::new(shape[2], shape[3], shape[4])?;
    let vol = plan.volume();
    let x = tape.data(xp);
    let w = tape.data(weights.w);
    let b = weights.b.map(|b| tape.data(b));

    let results: Vec<((Vec<f64>, Vec<f64>), Vec<f32>)> = (0..batch * channels)
        .into_par_iter()
        .map(|slab| {
            let c = slab % channels;
            let mut re: Vec<f64> = x[slab * vol..(slab + 1) * vol].iter().map(|&v| f64::from(v)).collect();
            let mut im = vec![0.0; vol];
            plan.run(&mut re, &mut im, false);
            let spectrum = (re.clone(), im.clone());
            let (wr, wi) = (f64::from(w[2 * c]), f64::from(w[2 * c + 1]));
            let (br, bi) = b.map_or((0.0, 0.0), |b| (f64::from(b[2 * c]), f64::from(b[2 * c + 1])));
            for k in 0..vol {
                let (a, bb) = (re[k], im[k]);
                re[k] = wr * a - wi * bb + br;
                im[k] = wr * bb + wi * a + bi;
            }
            plan.run(&mut re, &mut im, true);
            (spectrum, re.iter().map(|&v| v as f32).collect())
        })
        .collect();

    let mut out = Vec::with_capacity(x.len());
    let mut spectra = Vec::with_capacity(results.len());
    for (s, o) in results {
        spectra.push(s);
        out.extend_from_slice(&o);
    }
    let value = Tensor::from_vec(&shape, out)?;
    let mut inputs = vec![xp, weights.w];
    inputs.extend(weights.b);
    Ok(tape.push(
        value,
        &inputs,
        Box::new(SpectralFilterOp {
            plan,
            batch,
            channels,
            spectra,
        }),
    ))
}
