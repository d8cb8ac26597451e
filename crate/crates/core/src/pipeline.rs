//! Experiment stages shared by the command line and the acceptance suite.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, LoadPolicy};
use crate::codec::atomic_write;
use crate::config::ExperimentConfig;
use crate::data::{synth_classification_set, synth_volume_set, VolumeSample, SHAPE_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{build_model, param_report, ModelGraph, ParamReport, Task, TuningMode};
use crate::params::Role;
use crate::rng::Rng;
use crate::train::{self, EpochRecord};

pub struct PretrainOutcome {
    pub model: ModelGraph,
    pub epochs: Vec<EpochRecord>,
    pub accuracy: f64,
}

fn model_rng(cfg: &ExperimentConfig) -> Rng {
    Rng::new(cfg.seed).derive("model")
}

/// Builds the classification surrogate and trains it on synthetic shapes.
/// Fails when training accuracy stays below `pretrain.min_accuracy`.
pub fn pretrain(cfg: &ExperimentConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let rng = Rng::new(cfg.seed);
    let data = synth_classification_set(
        &rng.derive("pretrain.data"),
        cfg.pretrain.images,
        cfg.backbone.image_size,
    )?;
    let mut model = build_model(
        &cfg.backbone,
        &cfg.adapter,
        TuningMode::Scratch,
        Task::Classify { classes: SHAPE_CLASSES },
        &model_rng(cfg),
    )?;
    let epochs = train::pretrain_loop(
        &mut model,
        &data,
        &cfg.pretrain.train,
        &rng.derive("pretrain"),
        on_epoch,
    )?;
    let accuracy = train::classification_accuracy(&model, &data)?;
    if accuracy < cfg.pretrain.min_accuracy {
        return Err(Error::Training(format!(
            "pre-training accuracy {accuracy:.4} below required {} after {} epochs",
            cfg.pretrain.min_accuracy,
            epochs.len()
        )));
    }
    Ok(PretrainOutcome {
        model,
        epochs,
        accuracy,
    })
}

/// The fine-tuning volumes split into `(train, eval)`.
pub fn finetune_data(cfg: &ExperimentConfig) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
    let f = &cfg.finetune;
    let mut all = synth_volume_set(
        &Rng::new(cfg.seed).derive("finetune.data"),
        f.volumes,
        f.dims,
        f.classes,
    )?;
    let eval = all.split_off(f.train_volumes);
    Ok((all, eval))
}

/// Segmentation model for `cfg.finetune.mode`, with backbone weights taken
/// from `backbone` unless training from scratch.
pub fn segmentation_model(cfg: &ExperimentConfig, backbone: Option<&Checkpoint>) -> Result<ModelGraph> {
    let mode = cfg.finetune.mode;
    let mut model = build_model(
        &cfg.backbone,
        &cfg.adapter,
        mode,
        Task::Segment {
            classes: cfg.finetune.classes,
        },
        &model_rng(cfg),
    )?;
    match (mode, backbone) {
        (TuningMode::Scratch, _) => {}
        (_, Some(ck)) => {
            ck.apply(&mut model.store, LoadPolicy::BackboneOnly)?;
        }
        (_, None) => {
            return Err(Error::Config(format!(
                "mode {} needs a pre-trained checkpoint",
                mode.as_str()
            )));
        }
    }
    Ok(model)
}

pub struct FinetuneOutcome {
    pub model: ModelGraph,
    pub epochs: Vec<EpochRecord>,
    pub metrics: MetricsRecord,
    pub report: ParamReport,
}

pub fn finetune(
    cfg: &ExperimentConfig,
    backbone: Option<&Checkpoint>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (train_set, eval_set) = finetune_data(cfg)?;
    let mut model = segmentation_model(cfg, backbone)?;
    let epochs = train::finetune_loop(
        &mut model,
        &train_set,
        &cfg.finetune.train,
        &Rng::new(cfg.seed).derive("finetune"),
        on_epoch,
    )?;
    let metrics = train::evaluate(&model, &eval_set)?;
    let report = param_report(&model);
    Ok(FinetuneOutcome {
        model,
        epochs,
        metrics,
        report,
    })
}

/// One JSON-lines record. Training lines leave the evaluation fields null and
/// the evaluation line leaves `epoch` and `loss` null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub run_id: String,
    pub mode: String,
    pub phase: String,
    pub epoch: Option<usize>,
    pub loss: Option<f64>,
    pub dice: Option<Vec<f64>>,
    pub hd95: Option<Vec<Option<f64>>>,
    pub mean_dice: Option<f64>,
    pub tuned: usize,
    pub inserted: usize,
    /// Parameters a full fine-tune of the same backbone and head would update.
    pub full_tuned: usize,
}

pub fn metrics_lines(
    run_id: &str,
    mode: TuningMode,
    epochs: &[EpochRecord],
    metrics: Option<&MetricsRecord>,
    report: &ParamReport,
    full_tuned: usize,
) -> Vec<MetricsLine> {
    let base = MetricsLine {
        run_id: run_id.to_string(),
        mode: mode.as_str().to_string(),
        phase: "train".into(),
        epoch: None,
        loss: None,
        dice: None,
        hd95: None,
        mean_dice: None,
        tuned: report.tuned,
        inserted: report.inserted,
        full_tuned,
    };
    let mut out: Vec<MetricsLine> = epochs
        .iter()
        .map(|e| MetricsLine {
            epoch: Some(e.epoch),
            loss: Some(e.loss),
            ..base.clone()
        })
        .collect();
    if let Some(m) = metrics {
        out.push(MetricsLine {
            phase: "eval".into(),
            dice: Some(m.dice.clone()),
            hd95: Some(m.hd95.clone()),
            mean_dice: Some(m.mean_dice),
            ..base
        });
    }
    out
}

/// Per-epoch lines of a pre-training run, tagged with mode `pretrain`.
pub fn pretrain_lines(run_id: &str, outcome: &PretrainOutcome) -> Vec<MetricsLine> {
    let report = param_report(&outcome.model);
    outcome
        .epochs
        .iter()
        .map(|e| MetricsLine {
            run_id: run_id.to_string(),
            mode: "pretrain".into(),
            phase: "train".into(),
            epoch: Some(e.epoch),
            loss: Some(e.loss),
            dice: None,
            hd95: None,
            mean_dice: None,
            tuned: report.tuned,
            inserted: report.inserted,
            full_tuned: report.total,
        })
        .collect()
}

/// Tuned-parameter count of full fine-tuning under `cfg`.
pub fn full_tuned(cfg: &ExperimentConfig) -> Result<usize> {
    let m = build_model(
        &cfg.backbone,
        &cfg.adapter,
        TuningMode::Full,
        Task::Segment {
            classes: cfg.finetune.classes,
        },
        &model_rng(cfg),
    )?;
    Ok(param_report(&m).tuned)
}

pub fn write_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(
            s,
            "{}",
            serde_json::to_string(l).map_err(|e| Error::Format(e.to_string()))?
        );
    }
    atomic_write(path, s.as_bytes())
}

/// Backbone tensors that differ between two stores with the same layout.
pub fn changed_backbone(before: &Checkpoint, model: &ModelGraph) -> Vec<String> {
    model
        .store
        .entries()
        .iter()
        .filter(|e| e.role == Role::Backbone)
        .filter(|e| before.get(&e.name).map_or(true, |t| t.data() != e.tensor.data()))
        .map(|e| e.name.clone())
        .collect()
}
