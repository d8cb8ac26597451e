//! Segmentation and classification losses over class axis 1.
//!
//! Logits are `[B, K, ...]`; labels hold one class index per element of the
//! trailing axes, in `[B, ...]` row-major order.

use crate::autodiff::{BackwardCtx, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1.0;

struct Layout {
    batch: usize,
    classes: usize,
    inner: usize,
}

impl Layout {
    fn of(op: &'static str, shape: &[usize], labels: &[u8]) -> Result<Layout> {
        if shape.len() < 2 {
            return Err(Error::InvalidShape(format!(
                "{op} needs [B, K, ...] logits, got {shape:?}"
            )));
        }
        let (batch, classes) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if labels.len() != batch * inner {
            return Err(Error::InvalidShape(format!(
                "{op}: {} labels for logits {shape:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::Data(format!("{op}: label {bad} outside 0..{classes}")));
        }
        Ok(Layout { batch, classes, inner })
    }

    fn idx(&self, b: usize, k: usize, i: usize) -> usize {
        (b * self.classes + k) * self.inner + i
    }

    /// Softmax over the class axis, in `f64`.
    fn softmax(&self, z: &[f32]) -> Vec<f64> {
        let mut p = vec![0.0f64; z.len()];
        for b in 0..self.batch {
            for i in 0..self.inner {
                let m = (0..self.classes)
                    .map(|k| z[self.idx(b, k, i)])
                    .fold(f32::NEG_INFINITY, f32::max);
                let mut s = 0.0f64;
                for k in 0..self.classes {
                    let e = f64::from(z[self.idx(b, k, i)] - m).exp();
                    p[self.idx(b, k, i)] = e;
                    s += e;
                }
                for k in 0..self.classes {
                    p[self.idx(b, k, i)] /= s;
                }
            }
        }
        p
    }
}

struct CrossEntropyOp {
    layout: Layout,
    probs: Vec<f64>,
    labels: Vec<u8>,
}

impl Op for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let l = &self.layout;
        let scale = f64::from(g[0]) / (l.batch * l.inner) as f64;
        let mut dz: Vec<f32> = self.probs.iter().map(|&p| (p * scale) as f32).collect();
        for b in 0..l.batch {
            for i in 0..l.inner {
                let y = usize::from(self.labels[b * l.inner + i]);
                let j = l.idx(b, y, i);
                dz[j] = ((self.probs[j] - 1.0) * scale) as f32;
            }
        }
        vec![Some(dz)]
    }
}

/// Mean over elements of `−log softmax(z)[label]`, with max subtraction.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.check(logits)?;
    let layout = Layout::of("cross_entropy", tape.shape(logits), labels)?;
    let z = tape.data(logits);
    let mut total = 0.0f64;
    for b in 0..layout.batch {
        for i in 0..layout.inner {
            let m = (0..layout.classes)
                .map(|k| z[layout.idx(b, k, i)])
                .fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = (0..layout.classes)
                .map(|k| f64::from(z[layout.idx(b, k, i)] - m).exp())
                .sum::<f64>()
                .ln();
            let y = usize::from(labels[b * layout.inner + i]);
            total += lse - f64::from(z[layout.idx(b, y, i)] - m);
        }
    }
    let n = (layout.batch * layout.inner) as f64;
    let probs = layout.softmax(z);
    let value = Tensor::scalar((total / n) as f32);
    Ok(tape.push(
        value,
        &[logits],
        Box::new(CrossEntropyOp {
            layout,
            probs,
            labels: labels.to_vec(),
        }),
    ))
}

struct SoftDiceOp {
    layout: Layout,
    probs: Vec<f64>,
    labels: Vec<u8>,
    /// Per class: (intersection, Σp, Σy).
    sums: Vec<(f64, f64, f64)>,
}

impl Op for SoftDiceOp {
    fn name(&self) -> &'static str {
        "soft_dice"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let l = &self.layout;
        let kf = l.classes as f64;
        let g0 = f64::from(g[0]);
        // ∂L/∂p for every element, then through the softmax Jacobian.
        let mut dz = vec![0.0f32; self.probs.len()];
        let mut gp = vec![0.0f64; l.classes];
        for b in 0..l.batch {
            for i in 0..l.inner {
                let y = usize::from(self.labels[b * l.inner + i]);
                let mut dot = 0.0;
                for k in 0..l.classes {
                    let (inter, sp, sy) = self.sums[k];
                    let den = sp + sy + DICE_SMOOTH;
                    let yk = if k == y { 1.0 } else { 0.0 };
                    gp[k] = -g0 / kf * (2.0 * yk * den - (2.0 * inter + DICE_SMOOTH)) / (den * den);
                    dot += self.probs[l.idx(b, k, i)] * gp[k];
                }
                for k in 0..l.classes {
                    let j = l.idx(b, k, i);
                    dz[j] = (self.probs[j] * (gp[k] - dot)) as f32;
                }
            }
        }
        vec![Some(dz)]
    }
}

/// `1 − mean_k (2·Σp_k·y_k + s) / (Σp_k + Σy_k + s)` with `p = softmax(z)`,
/// sums taken over the whole batch, `s = 1`.
pub fn soft_dice(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.check(logits)?;
    let layout = Layout::of("soft_dice", tape.shape(logits), labels)?;
    let probs = layout.softmax(tape.data(logits));
    let mut sums = vec![(0.0f64, 0.0f64, 0.0f64); layout.classes];
    for b in 0..layout.batch {
        for i in 0..layout.inner {
            let y = usize::from(labels[b * layout.inner + i]);
            for (k, s) in sums.iter_mut().enumerate() {
                let p = probs[layout.idx(b, k, i)];
                s.1 += p;
                if k == y {
                    s.0 += p;
                    s.2 += 1.0;
                }
            }
        }
    }
    let mean: f64 = sums
        .iter()
        .map(|&(inter, sp, sy)| (2.0 * inter + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH))
        .sum::<f64>()
        / layout.classes as f64;
    let value = Tensor::scalar((1.0 - mean) as f32);
    Ok(tape.push(
        value,
        &[logits],
        Box::new(SoftDiceOp {
            layout,
            probs,
            labels: labels.to_vec(),
            sums,
        }),
    ))
}

/// `w_ce·CE + w_dice·soft-Dice`.
pub fn composite_loss(tape: &mut Tape, logits: Var, labels: &[u8], w_ce: f32, w_dice: f32) -> Result<Var> {
    if w_ce < 0.0 || w_dice < 0.0 || (w_ce == 0.0 && w_dice == 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative and not both zero, got {w_ce}, {w_dice}"
        )));
    }
    let ce = cross_entropy(tape, logits, labels)?;
    let dl = soft_dice(tape, logits, labels)?;
    let a = tape.scale(ce, w_ce)?;
    let b = tape.scale(dl, w_dice)?;
    tape.add(a, b)
}
