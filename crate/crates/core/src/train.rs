//! Pre-training and fine-tuning loops and held-out evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::{volume_batch, ImageSet, VolumeSample};
use crate::error::{Error, Result};
use crate::loss;
use crate::metrics::{LabelVolume, MetricsRecord};
use crate::model::ModelGraph;
use crate::optim::Adam;
use crate::params::Binding;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
}

fn step(
    model: &mut ModelGraph,
    opt: &mut Adam,
    at: (usize, usize),
    build: impl FnOnce(&ModelGraph, &mut Tape, &Binding) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let loss = build(model, &mut tape, &bind)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Training(format!(
            "loss became {value} at epoch {} step {} (lr {})",
            at.0, at.1, opt.lr
        )));
    }
    tape.backward(loss)?;
    model.store.collect_grads(&tape, &bind);
    opt.step(&mut model.store)?;
    Ok(f64::from(value))
}

fn epoch_order(rng: &Rng, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.derive_index(epoch as u64).shuffle(&mut idx);
    idx
}

/// Trains every trainable tensor on image classification with cross-entropy.
pub fn pretrain_loop(
    model: &mut ModelGraph,
    data: &ImageSet,
    cfg: &TrainConfig,
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut opt = cfg.optimizer()?;
    let shuffle = rng.derive("pretrain.shuffle");
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&shuffle, epoch, data.len());
        let mut total = 0.0;
        let mut steps = 0;
        for (s, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = data.batch(idx)?;
            total += step(model, &mut opt, (epoch, s), |m, tape, bind| {
                let x = tape.constant(images);
                let logits = m.classify_forward(tape, bind, x)?;
                loss::cross_entropy(tape, logits, &labels)
            })?;
            steps += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: total / steps as f64,
        };
        on_epoch(&rec);
        out.push(rec);
    }
    Ok(out)
}

fn argmax_rows(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let z = logits.data();
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for i in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if z[(b * k + c) * inner + i] > z[(b * k + best) * inner + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Fraction of `data` classified correctly, evaluated in parallel chunks.
pub fn classification_accuracy(model: &ModelGraph, data: &ImageSet) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let correct = idx
        .par_chunks(64)
        .map(|chunk| {
            let (images, labels) = data.batch(chunk)?;
            let pred = argmax_rows(&model.classify_logits(&images)?);
            Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count())
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Optimizes the weighted CE + soft-Dice loss over `train`.
pub fn finetune_loop(
    model: &mut ModelGraph,
    train: &[VolumeSample],
    cfg: &TrainConfig,
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut opt = cfg.optimizer()?;
    let shuffle = rng.derive("finetune.shuffle");
    let w = cfg.loss_weights;
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&shuffle, epoch, train.len());
        let mut total = 0.0;
        let mut steps = 0;
        for (s, idx) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<&VolumeSample> = idx.iter().map(|&i| &train[i]).collect();
            let (vol, labels) = volume_batch(&picked)?;
            total += step(model, &mut opt, (epoch, s), |m, tape, bind| {
                let x = tape.constant(vol);
                let logits = m.segment_forward(tape, bind, x)?;
                loss::composite_loss(tape, logits, &labels, w.ce, w.dice)
            })?;
            steps += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: total / steps as f64,
        };
        on_epoch(&rec);
        out.push(rec);
    }
    Ok(out)
}

/// Arg-max label map for one volume.
pub fn predict(model: &ModelGraph, sample: &VolumeSample) -> Result<LabelVolume> {
    let (vol, _) = volume_batch(&[sample])?;
    let logits = model.segment_logits(&vol)?;
    LabelVolume::new(sample.labels.dims, argmax_rows(&logits))
}

/// Per-class Dice and HD95 averaged over `samples`, scored in parallel.
pub fn evaluate(model: &ModelGraph, samples: &[VolumeSample]) -> Result<MetricsRecord> {
    let records = samples
        .par_iter()
        .map(|s| MetricsRecord::score(&predict(model, s)?, &s.labels, model.num_classes()))
        .collect::<Result<Vec<_>>>()?;
    MetricsRecord::average(&records)
}
