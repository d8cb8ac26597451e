//! Slice-wise 2D Transformer backbone with inserted adapters and a
//! pointwise-conv + nearest-upsampling segmentation decoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    self, AdapterConfig, AdapterParams, Branches, InterMode, StageState, VanillaAdapterParams, VolumeGeometry, INIT_STD,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, AttentionBlockParams, Dense, LayerNormParams};
use crate::params::{Binding, ParamId, ParamStore, Role};
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Flat,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layout: Layout,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub input_channels: usize,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layout: Layout::Flat,
            stage_dims: vec![48; 4],
            stage_depths: vec![1; 4],
            heads: vec![3; 4],
            patch: 4,
            mlp_ratio: 4,
            input_channels: 1,
            image_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_dims.len();
        if n == 0 || self.stage_depths.len() != n || self.heads.len() != n {
            return Err(Error::Config(format!(
                "stage_dims ({}), stage_depths ({}) and heads ({}) must be non-empty and equal length",
                n,
                self.stage_depths.len(),
                self.heads.len()
            )));
        }
        if self.stage_depths.contains(&0) || self.stage_dims.contains(&0) {
            return Err(Error::Config("stage dims and depths must be positive".into()));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.input_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("input_channels and mlp_ratio must be positive".into()));
        }
        for (d, h) in self.stage_dims.iter().zip(&self.heads) {
            if *h == 0 || d % h != 0 {
                return Err(Error::Config(format!("width {d} not divisible by {h} heads")));
            }
        }
        match self.layout {
            Layout::Flat => {
                if self.stage_dims.iter().any(|&d| d != self.stage_dims[0]) {
                    return Err(Error::Config("flat layout needs a constant width".into()));
                }
            }
            Layout::Hierarchical => {
                if self.stage_dims.windows(2).any(|w| w[1] != 2 * w[0]) {
                    return Err(Error::Config("hierarchical widths must double per stage".into()));
                }
                let g = self.image_size / self.patch;
                let f = 1usize << (n - 1);
                if g % f != 0 {
                    return Err(Error::Config(format!(
                        "token grid {g} cannot be halved {} times",
                        n - 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self, stage: usize) -> usize {
        let g = self.image_size / self.patch;
        match self.layout {
            Layout::Flat => g,
            Layout::Hierarchical => g >> stage,
        }
    }

    pub fn hidden(&self, stage: usize) -> usize {
        self.stage_dims[stage] * self.mlp_ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    Scratch,
    Full,
    Head,
    VanillaAdapter,
    MedTuning,
}

impl TuningMode {
    pub const ALL: [TuningMode; 5] = [
        TuningMode::Scratch,
        TuningMode::Full,
        TuningMode::Head,
        TuningMode::VanillaAdapter,
        TuningMode::MedTuning,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "scratch" => Ok(TuningMode::Scratch),
            "full" => Ok(TuningMode::Full),
            "head" => Ok(TuningMode::Head),
            "vanilla_adapter" => Ok(TuningMode::VanillaAdapter),
            "med_tuning" => Ok(TuningMode::MedTuning),
            _ => Err(Error::Config(format!("unknown tuning mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Scratch => "scratch",
            TuningMode::Full => "full",
            TuningMode::Head => "head",
            TuningMode::VanillaAdapter => "vanilla_adapter",
            TuningMode::MedTuning => "med_tuning",
        }
    }

    pub fn has_adapters(self) -> bool {
        matches!(self, TuningMode::VanillaAdapter | TuningMode::MedTuning)
    }

    /// Whether tensors of `role` are updated in this mode.
    pub fn trains(self, role: Role) -> bool {
        match self {
            TuningMode::Scratch | TuningMode::Full => true,
            TuningMode::Head => role == Role::Decoder || role == Role::Head,
            TuningMode::VanillaAdapter | TuningMode::MedTuning => {
                matches!(role, Role::Adapter | Role::Decoder | Role::Head)
            }
        }
    }
}

/// Adapter settings shared by every inserted adapter of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterTemplate {
    pub alpha: usize,
    pub branches: Branches,
    pub fft_bias: bool,
    pub inter_mode: InterMode,
    pub activation: Activation,
}

impl Default for AdapterTemplate {
    fn default() -> Self {
        AdapterTemplate {
            alpha: 6,
            branches: Branches::ALL,
            fft_bias: false,
            inter_mode: InterMode::Concat,
            activation: Activation::Gelu,
        }
    }
}

impl AdapterTemplate {
    /// Configuration of the adapter after a block of width `channels`.
    /// `prev_channels` is the previous stage's width (not bottleneck).
    pub fn for_block(&self, channels: usize, is_stage_last: bool, prev_channels: Option<usize>) -> AdapterConfig {
        AdapterConfig {
            channels,
            alpha: self.alpha,
            branches: self.branches,
            fft_bias: self.fft_bias,
            inter_mode: if is_stage_last {
                self.inter_mode
            } else {
                InterMode::None
            },
            is_stage_last,
            prev_channels: if is_stage_last {
                prev_channels.map(|c| c / self.alpha.max(1))
            } else {
                None
            },
            activation: self.activation,
        }
    }

    /// Per-block configurations for a stack of stages.
    pub fn layout(&self, dims: &[usize], depths: &[usize]) -> Vec<Vec<AdapterConfig>> {
        dims.iter()
            .zip(depths)
            .enumerate()
            .map(|(s, (&d, &n))| {
                (0..n)
                    .map(|b| self.for_block(d, b + 1 == n, s.checked_sub(1).map(|p| dims[p])))
                    .collect()
            })
            .collect()
    }
}

/// What sits on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Mean-pooled tokens → linear, for pre-training.
    Classify { classes: usize },
    /// Pointwise conv → nearest upsampling, per slice.
    Segment { classes: usize },
}

#[derive(Debug, Clone, Copy)]
pub enum BlockAdapter {
    Vanilla(VanillaAdapterParams<ParamId>),
    Med(AdapterParams<ParamId>, AdapterConfig),
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub merge: Option<Dense<ParamId>>,
    pub blocks: Vec<AttentionBlockParams<ParamId>>,
    pub adapters: Vec<Option<BlockAdapter>>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub backbone: BackboneConfig,
    pub template: AdapterTemplate,
    pub mode: TuningMode,
    pub task: Task,
    pub store: ParamStore,
    pub embed: Dense<ParamId>,
    pub pos: ParamId,
    pub stages: Vec<StageParams>,
    pub norm: LayerNormParams<ParamId>,
    pub head: Dense<ParamId>,
}

fn trunc(name: &str, shape: &[usize], rng: &Rng) -> Result<Tensor> {
    let mut r = rng.derive(name);
    Tensor::new(
        shape,
        Fill::TruncatedNormal {
            rng: &mut r,
            mean: 0.0,
            std: INIT_STD,
        },
    )
}

fn dense(
    store: &mut ParamStore,
    name: &str,
    role: Role,
    d_in: usize,
    d_out: usize,
    rng: &Rng,
) -> Result<Dense<ParamId>> {
    Ok(Dense {
        weight: store.add(format!("{name}.weight"), role, trunc(name, &[d_in, d_out], rng)?)?,
        bias: store.add(format!("{name}.bias"), role, Tensor::zeros(&[d_out])?)?,
    })
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Result<LayerNormParams<ParamId>> {
    Ok(LayerNormParams {
        gamma: store.add(
            format!("{name}.gamma"),
            Role::Backbone,
            Tensor::new(&[d], Fill::Constant(1.0))?,
        )?,
        beta: store.add(format!("{name}.beta"), Role::Backbone, Tensor::zeros(&[d])?)?,
    })
}

/// Allocates a model. Every tensor draws from a sub-stream named after the
/// tensor, so backbone and decoder weights do not depend on the mode.
pub fn build_model(
    bc: &BackboneConfig,
    template: &AdapterTemplate,
    mode: TuningMode,
    task: Task,
    rng: &Rng,
) -> Result<ModelGraph> {
    bc.validate()?;
    let mut store = ParamStore::new();
    let d0 = bc.stage_dims[0];
    let tokens = bc.grid(0) * bc.grid(0);
    let embed = dense(
        &mut store,
        "embed",
        Role::Backbone,
        bc.input_channels * bc.patch * bc.patch,
        d0,
        rng,
    )?;
    let pos = store.add("embed.pos", Role::Backbone, trunc("embed.pos", &[tokens, d0], rng)?)?;

    let adapter_cfgs = template.layout(&bc.stage_dims, &bc.stage_depths);
    let mut stages = Vec::with_capacity(bc.stage_dims.len());
    for (s, (&d, &depth)) in bc.stage_dims.iter().zip(&bc.stage_depths).enumerate() {
        let merge = (bc.layout == Layout::Hierarchical && s > 0)
            .then(|| dense(&mut store, &format!("stage{s}.merge"), Role::Backbone, 2 * d, d, rng))
            .transpose()?;
        let mut blocks = Vec::with_capacity(depth);
        let mut adapters = Vec::with_capacity(depth);
        for b in 0..depth {
            let p = format!("stage{s}.block{b}");
            let hidden = bc.hidden(s);
            blocks.push(AttentionBlockParams {
                norm1: norm(&mut store, &format!("{p}.norm1"), d)?,
                qkv: dense(&mut store, &format!("{p}.qkv"), Role::Backbone, d, 3 * d, rng)?,
                proj: dense(&mut store, &format!("{p}.proj"), Role::Backbone, d, d, rng)?,
                norm2: norm(&mut store, &format!("{p}.norm2"), d)?,
                fc1: dense(&mut store, &format!("{p}.fc1"), Role::Backbone, d, hidden, rng)?,
                fc2: dense(&mut store, &format!("{p}.fc2"), Role::Backbone, hidden, d, rng)?,
                heads: bc.heads[s],
            });
            let ap = format!("{p}.adapter");
            let mut arng = rng.derive(&ap);
            adapters.push(match mode {
                TuningMode::VanillaAdapter => Some(BlockAdapter::Vanilla(adapter::allocate_vanilla(
                    &mut store,
                    &ap,
                    d,
                    template.alpha,
                    &mut arng,
                )?)),
                TuningMode::MedTuning => {
                    let cfg = adapter_cfgs[s][b];
                    Some(BlockAdapter::Med(
                        adapter::allocate_adapter(&mut store, &ap, &cfg, &mut arng)?,
                        cfg,
                    ))
                }
                _ => None,
            });
        }
        stages.push(StageParams {
            merge,
            blocks,
            adapters,
        });
    }
    let d_last = *bc.stage_dims.last().expect("validated non-empty");
    let norm_p = norm(&mut store, "norm", d_last)?;
    let head = match task {
        Task::Classify { classes } => dense(&mut store, "cls_head", Role::Head, d_last, classes, rng)?,
        Task::Segment { classes } => dense(&mut store, "decoder", Role::Decoder, d_last, classes, rng)?,
    };
    let mut m = ModelGraph {
        backbone: bc.clone(),
        template: *template,
        mode,
        task,
        store,
        embed,
        pos,
        stages,
        norm: norm_p,
        head,
    };
    m.apply_freeze();
    Ok(m)
}

impl ModelGraph {
    pub fn apply_freeze(&mut self) {
        let mode = self.mode;
        self.store.set_trainable_by_role(|r| mode.trains(r));
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::Classify { classes } | Task::Segment { classes } => classes,
        }
    }

    /// Runs embedding and all stages on `[N, C, H, W]` slices. `geom` gives
    /// the `(B, D)` volume factorization of `N` needed by Med-Adapters.
    fn features(&self, tape: &mut Tape, bind: &Binding, x: Var, bd: (usize, usize)) -> Result<(Var, usize)> {
        let v = |id: ParamId| bind.var(id);
        let bc = &self.backbone;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != bc.input_channels || xs[2] != bc.image_size || xs[3] != bc.image_size {
            return Err(Error::InvalidShape(format!(
                "expected [N, {}, {}, {}] slices, got {xs:?}",
                bc.input_channels, bc.image_size, bc.image_size
            )));
        }
        let n = xs[0];
        let mut h = nn::patch_embed2d(tape, x, bc.patch, self.embed.map(v))?;
        let g0 = bc.grid(0);
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..g0 * g0).collect();
        let pos = tape.embed_lookup(v(self.pos), &idx)?;
        let pos = tape.reshape(pos, &[n, g0 * g0, bc.stage_dims[0]])?;
        h = tape.add(h, pos)?;

        let mut state = StageState::default();
        let mut grid = g0;
        for stage in &self.stages {
            if let Some(m) = stage.merge {
                h = nn::patch_merge(tape, h, (grid, grid), m.map(v))?;
                grid /= 2;
            }
            let geom = VolumeGeometry {
                batch: bd.0,
                depth: bd.1,
                height: grid,
                width: grid,
            };
            for (block, ad) in stage.blocks.iter().zip(&stage.adapters) {
                h = nn::attention_block(tape, h, &block.map(v))?;
                match ad {
                    None => {}
                    Some(BlockAdapter::Vanilla(p)) => {
                        h = adapter::vanilla_adapter(tape, h, &p.map(v), self.template.activation)?;
                    }
                    Some(BlockAdapter::Med(p, cfg)) => {
                        let (out, next) = adapter::med_adapter_forward(tape, h, &geom, &p.map(v), cfg, state)?;
                        h = out;
                        state = next;
                    }
                }
            }
        }
        let h = tape.layer_norm(h, Some((v(self.norm.gamma), v(self.norm.beta))), 2, nn::LN_EPS)?;
        Ok((h, grid))
    }

    /// Classification logits `[N, classes]` for `[N, C, H, W]` images.
    pub fn classify_forward(&self, tape: &mut Tape, bind: &Binding, images: Var) -> Result<Var> {
        if !matches!(self.task, Task::Classify { .. }) {
            return Err(Error::Config("classify_forward on a segmentation model".into()));
        }
        let n = tape.shape(images)[0];
        let (h, _) = self.features(tape, bind, images, (n, 1))?;
        let pooled = tape.mean(h, &[1])?;
        nn::linear(tape, pooled, self.head.map(|id| bind.var(id)))
    }

    /// Per-voxel logits `[B, K, D, H, W]` for a `[B, C, D, H, W]` volume.
    pub fn segment_forward(&self, tape: &mut Tape, bind: &Binding, vol: Var) -> Result<Var> {
        let Task::Segment { classes } = self.task else {
            return Err(Error::Config("segment_forward on a classification model".into()));
        };
        let vs = tape.shape(vol).to_vec();
        if vs.len() != 5 {
            return Err(Error::InvalidShape(format!("expected [B, C, D, H, W], got {vs:?}")));
        }
        let (b, d) = (vs[0], vs[2]);
        let slices = volume_to_slices(tape, vol)?;
        let (h, grid) = self.features(tape, bind, slices, (b, d))?;
        let logits = nn::linear(tape, h, self.head.map(|id| bind.var(id)))?;
        let n = b * d;
        let logits = tape.reshape(logits, &[n, grid, grid, classes])?;
        let logits = tape.permute(logits, &[0, 3, 1, 2])?;
        let up = nn::upsample_nearest(tape, logits, self.backbone.image_size / grid)?;
        slices_to_volume(tape, up, b, d)
    }

    /// Inference helper returning the logits tensor.
    pub fn segment_logits(&self, vol: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let v = tape.constant(vol.clone());
        let out = self.segment_forward(&mut tape, &bind, v)?;
        Ok(tape.value(out).clone())
    }

    pub fn classify_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let v = tape.constant(images.clone());
        let out = self.classify_forward(&mut tape, &bind, v)?;
        Ok(tape.value(out).clone())
    }

    /// Adapter configurations in insertion order (Med-Adapters only).
    pub fn adapter_configs(&self) -> Vec<AdapterConfig> {
        self.stages
            .iter()
            .flat_map(|s| s.adapters.iter())
            .filter_map(|a| match a {
                Some(BlockAdapter::Med(_, c)) => Some(*c),
                _ => None,
            })
            .collect()
    }
}

/// `[B, C, D, H, W] → [B·D, C, H, W]`; slice `s` of batch `b` lands at `b·D + s`.
pub fn volume_to_slices(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 5 {
        return Err(Error::InvalidShape(format!(
            "volume_to_slices expects rank 5, got {s:?}"
        )));
    }
    let p = tape.permute(v, &[0, 2, 1, 3, 4])?;
    tape.reshape(p, &[s[0] * s[2], s[1], s[3], s[4]])
}

/// Inverse of [`volume_to_slices`]: `[B·D, C, H, W] → [B, C, D, H, W]`.
pub fn slices_to_volume(tape: &mut Tape, x: Var, batch: usize, depth: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || batch == 0 || s[0] % batch != 0 || s[0] / batch != depth {
        return Err(Error::InvalidShape(format!(
            "slices_to_volume: {s:?} cannot be split into batch {batch} × depth {depth}"
        )));
    }
    let r = tape.reshape(x, &[batch, depth, s[1], s[2], s[3]])?;
    tape.permute(r, &[0, 2, 1, 3, 4])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub role: Role,
    pub count: usize,
    pub tuned: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub tuned: usize,
    pub frozen: usize,
    pub inserted: usize,
    pub rows: Vec<ParamRow>,
}

impl ParamReport {
    /// Builds totals from rows.
    pub fn from_rows(rows: Vec<ParamRow>) -> Self {
        let total = rows.iter().map(|r| r.count).sum();
        let tuned = rows.iter().filter(|r| r.tuned).map(|r| r.count).sum();
        let inserted = rows.iter().filter(|r| r.role == Role::Adapter).map(|r| r.count).sum();
        ParamReport {
            total,
            tuned,
            frozen: total - tuned,
            inserted,
            rows,
        }
    }

    pub fn by_role(&self, role: Role) -> usize {
        self.rows.iter().filter(|r| r.role == role).map(|r| r.count).sum()
    }
}

/// Counts stored tensors grouped by layer (name without its last component).
pub fn param_report(m: &ModelGraph) -> ParamReport {
    let mut groups: BTreeMap<usize, ParamRow> = BTreeMap::new();
    let mut order: BTreeMap<String, usize> = BTreeMap::new();
    for e in m.store.entries() {
        let layer = e.name.rsplit_once('.').map_or(e.name.as_str(), |(l, _)| l).to_string();
        let next = order.len();
        let key = *order
            .entry(format!("{layer}/{}/{}", e.role.as_str(), e.tensor.trainable()))
            .or_insert(next);
        let row = groups.entry(key).or_insert_with(|| ParamRow {
            name: layer,
            role: e.role,
            count: 0,
            tuned: e.tensor.trainable(),
        });
        row.count += e.tensor.len();
    }
    ParamReport::from_rows(groups.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            layout: Layout::Flat,
            stage_dims: vec![12, 12],
            stage_depths: vec![1, 2],
            heads: vec![2, 2],
            patch: 4,
            mlp_ratio: 2,
            input_channels: 1,
            image_size: 8,
        }
    }

    fn template() -> AdapterTemplate {
        AdapterTemplate {
            alpha: 3,
            ..AdapterTemplate::default()
        }
    }

    fn volume(b: usize, d: usize, hw: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::new(
            &[b, 1, d, hw, hw],
            Fill::Uniform {
                rng: &mut r,
                lo: 0.0,
                hi: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn slices_round_trip_and_indexing() {
        let v = Tensor::from_vec(&[2, 1, 3, 1, 1], (0..6).map(|i| i as f32).collect()).unwrap();
        let mut tape = Tape::new();
        let vv = tape.leaf(&v);
        let s = volume_to_slices(&mut tape, vv).unwrap();
        assert_eq!(tape.shape(s), &[6, 1, 1, 1]);
        assert_eq!(tape.data(s)[4], 4.0); // (b=1, s=1)
        let back = slices_to_volume(&mut tape, s, 2, 3).unwrap();
        assert_eq!(tape.value(back).data(), v.data());
        assert!(slices_to_volume(&mut tape, s, 4, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut bc = tiny();
        assert!(bc.validate().is_ok());
        bc.stage_dims = vec![12, 24];
        assert!(bc.validate().is_err());
        bc.layout = Layout::Hierarchical;
        assert!(bc.validate().is_ok());
        bc.heads = vec![5, 2];
        assert!(bc.validate().is_err());
    }

    #[test]
    fn output_shape_and_identity_at_init() {
        let bc = tiny();
        let task = Task::Segment { classes: 3 };
        let rng = Rng::new(1);
        let head = build_model(&bc, &template(), TuningMode::Head, task, &rng).unwrap();
        let med = build_model(&bc, &template(), TuningMode::MedTuning, task, &rng).unwrap();
        let van = build_model(&bc, &template(), TuningMode::VanillaAdapter, task, &rng).unwrap();
        let v = volume(2, 3, 8, 2);
        let a = head.segment_logits(&v).unwrap();
        assert_eq!(a.shape(), &[2, 3, 3, 8, 8]);
        assert_eq!(a.data(), med.segment_logits(&v).unwrap().data());
        assert_eq!(a.data(), van.segment_logits(&v).unwrap().data());
    }

    #[test]
    fn freeze_masks_and_report() {
        let bc = tiny();
        let task = Task::Segment { classes: 3 };
        let rng = Rng::new(1);
        let full = build_model(&bc, &template(), TuningMode::Full, task, &rng).unwrap();
        let r = param_report(&full);
        assert_eq!((r.tuned, r.inserted), (r.total, 0));
        let head = build_model(&bc, &template(), TuningMode::Head, task, &rng).unwrap();
        let r = param_report(&head);
        assert_eq!(r.tuned, r.by_role(Role::Decoder));
        assert_eq!(r.tuned, 12 * 3 + 3);
        let med = build_model(&bc, &template(), TuningMode::MedTuning, task, &rng).unwrap();
        let r = param_report(&med);
        let formula: usize = med
            .adapter_configs()
            .iter()
            .map(|c| adapter::adapter_param_count(c).unwrap())
            .sum();
        assert_eq!(r.inserted, formula);
        assert_eq!(r.tuned, formula + 39);
        assert_eq!(r.total, r.tuned + r.frozen);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let bc = tiny();
        let mut m = build_model(
            &bc,
            &template(),
            TuningMode::MedTuning,
            Task::Segment { classes: 2 },
            &Rng::new(3),
        )
        .unwrap();
        let mut r = Rng::new(4);
        for e in m.store.entries_mut() {
            if e.role == Role::Adapter {
                e.tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = r.uniform(-0.3, 0.3) as f32);
            }
        }
        let a = volume(1, 2, 8, 5);
        let b = volume(1, 2, 8, 6);
        let cat = |x: &Tensor, y: &Tensor| {
            Tensor::from_vec(&[2, 1, 2, 8, 8], x.data().iter().chain(y.data()).copied().collect()).unwrap()
        };
        let ab = m.segment_logits(&cat(&a, &b)).unwrap();
        let ba = m.segment_logits(&cat(&b, &a)).unwrap();
        let half = ab.len() / 2;
        assert_eq!(&ab.data()[..half], &ba.data()[half..]);
        assert_eq!(&ab.data()[half..], &ba.data()[..half]);
    }

    #[test]
    fn hierarchical_forward_runs() {
        let bc = BackboneConfig {
            layout: Layout::Hierarchical,
            stage_dims: vec![6, 12],
            stage_depths: vec![1, 1],
            heads: vec![2, 2],
            patch: 2,
            mlp_ratio: 2,
            input_channels: 1,
            image_size: 8,
        };
        let t = AdapterTemplate {
            alpha: 2,
            ..AdapterTemplate::default()
        };
        let m = build_model(
            &bc,
            &t,
            TuningMode::MedTuning,
            Task::Segment { classes: 2 },
            &Rng::new(0),
        )
        .unwrap();
        let out = m.segment_logits(&volume(1, 2, 8, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 8, 8]);
        let c = Task::Classify { classes: 4 };
        let m = build_model(&bc, &t, TuningMode::Full, c, &Rng::new(0)).unwrap();
        let imgs = Tensor::zeros(&[3, 1, 8, 8]).unwrap();
        assert_eq!(m.classify_logits(&imgs).unwrap().shape(), &[3, 4]);
    }
}
