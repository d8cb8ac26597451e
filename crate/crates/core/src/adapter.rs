//! The Med-Adapter block and the vanilla bottleneck adapter baseline.
//!
//! Token tensors are `[N, T, C]` with `N = B·D` slices of `T = H·W` tokens.
//! Inside the adapter the bottleneck features live in the volume layout
//! `[B, C', D, H, W]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Dense, DepthwiseKernelPair};
use crate::params::{ParamId, ParamStore, Role};
use crate::rng::Rng;
use crate::spectral::{spectral_filter, SpectralWeights};
use crate::tensor::{Fill, Tensor};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterMode {
    None,
    Add,
    Max,
    #[default]
    Concat,
}

impl InterMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InterMode::None),
            "add" => Ok(InterMode::Add),
            "max" => Ok(InterMode::Max),
            "concat" => Ok(InterMode::Concat),
            _ => Err(Error::Config(format!("unknown inter mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterMode::None => "none",
            InterMode::Add => "add",
            InterMode::Max => "max",
            InterMode::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    pub conv3: bool,
    pub conv5: bool,
    pub fft: bool,
    pub channel_mix: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches::ALL
    }
}

impl Branches {
    pub const ALL: Branches = Branches {
        conv3: true,
        conv5: true,
        fft: true,
        channel_mix: true,
    };
    pub const NONE: Branches = Branches {
        conv3: false,
        conv5: false,
        fft: false,
        channel_mix: false,
    };

    /// Parses a comma list such as `conv3,conv5,fft,mix`; `all` and `none`
    /// are accepted as shorthands.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => return Ok(Branches::ALL),
            "none" | "" => return Ok(Branches::NONE),
            _ => {}
        }
        let mut b = Branches::NONE;
        for part in s.split(',').map(str::trim) {
            match part {
                "conv3" => b.conv3 = true,
                "conv5" => b.conv5 = true,
                "fft" => b.fft = true,
                "mix" | "channel_mix" => b.channel_mix = true,
                _ => return Err(Error::Config(format!("unknown branch {part:?}"))),
            }
        }
        Ok(b)
    }

    pub fn any_feature(&self) -> bool {
        self.conv3 || self.conv5 || self.fft
    }
}

/// One inserted Med-Adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub channels: usize,
    pub alpha: usize,
    pub branches: Branches,
    pub fft_bias: bool,
    pub inter_mode: InterMode,
    pub is_stage_last: bool,
    /// Bottleneck width of the previous stage's last adapter; `None` for the
    /// first stage, where inter-stage fusion is the identity.
    pub prev_channels: Option<usize>,
    pub activation: Activation,
}

impl AdapterConfig {
    pub fn new(channels: usize, alpha: usize) -> Self {
        AdapterConfig {
            channels,
            alpha,
            branches: Branches::ALL,
            fft_bias: false,
            inter_mode: InterMode::None,
            is_stage_last: false,
            prev_channels: None,
            activation: Activation::Gelu,
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / self.alpha.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "channels {} and alpha {} must be positive",
                self.channels, self.alpha
            )));
        }
        if self.channels % self.alpha != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by alpha {}",
                self.channels, self.alpha
            )));
        }
        if self.inter_mode != InterMode::None && !self.is_stage_last {
            return Err(Error::Config(
                "inter-stage fusion is only valid on a stage-last adapter".into(),
            ));
        }
        if self.prev_channels == Some(0) {
            return Err(Error::Config("previous bottleneck width must be positive".into()));
        }
        if !self.branches.any_feature() {
            return Err(Error::Config(
                "at least one of conv3, conv5, fft must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Whether alignment (and, for concat, fuse) parameters exist.
    pub fn has_inter_params(&self) -> bool {
        self.is_stage_last && self.inter_mode != InterMode::None && self.prev_channels.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterParams<T> {
    pub down: Dense<T>,
    pub up: Dense<T>,
    pub pair3: Option<DepthwiseKernelPair<T>>,
    pub pair5: Option<DepthwiseKernelPair<T>>,
    pub spectral: Option<SpectralWeights<T>>,
    pub mix: Option<Dense<T>>,
    pub align: Option<Dense<T>>,
    pub fuse: Option<Dense<T>>,
}

impl<T: Copy> AdapterParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> AdapterParams<U> {
        AdapterParams {
            down: self.down.map(&mut f),
            up: self.up.map(&mut f),
            pair3: self.pair3.map(|p| p.map(&mut f)),
            pair5: self.pair5.map(|p| p.map(&mut f)),
            spectral: self.spectral.map(|s| s.map(&mut f)),
            mix: self.mix.map(|d| d.map(&mut f)),
            align: self.align.map(|d| d.map(&mut f)),
            fuse: self.fuse.map(|d| d.map(&mut f)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VanillaAdapterParams<T> {
    pub down: Dense<T>,
    pub up: Dense<T>,
}

impl<T: Copy> VanillaAdapterParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> VanillaAdapterParams<U> {
        VanillaAdapterParams {
            down: self.down.map(&mut f),
            up: self.up.map(&mut f),
        }
    }
}

/// Volume geometry of a token tensor: `N = batch·depth`, `T = height·width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeGeometry {
    pub batch: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

/// The enhanced feature emitted by the previous stage's last adapter.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageState {
    pub h_last: Option<Var>,
}

/// Closed-form parameter count of each component of one Med-Adapter, in
/// allocation order. Disabled components are omitted.
pub fn adapter_components(cfg: &AdapterConfig) -> Result<Vec<(&'static str, usize)>> {
    cfg.validate()?;
    let (c, m) = (cfg.channels, cfg.bottleneck());
    let b = &cfg.branches;
    let mut parts = vec![("down", nn::dense_count(c, m)), ("up", nn::dense_count(m, c))];
    if b.conv3 {
        parts.push(("conv3", nn::dw_pair_count(m, 3)));
    }
    if b.conv5 {
        parts.push(("conv5", nn::dw_pair_count(m, 5)));
    }
    if b.fft {
        parts.push(("fft", 2 * m + if cfg.fft_bias { 2 * m } else { 0 }));
    }
    if b.channel_mix {
        parts.push(("mix", nn::dense_count(m, m)));
    }
    if cfg.has_inter_params() {
        let prev = cfg.prev_channels.expect("checked by has_inter_params");
        parts.push(("align", nn::dense_count(prev, m)));
        if cfg.inter_mode == InterMode::Concat {
            parts.push(("fuse", nn::dense_count(2 * m, m)));
        }
    }
    Ok(parts)
}

/// Closed-form parameter count of one Med-Adapter.
pub fn adapter_param_count(cfg: &AdapterConfig) -> Result<usize> {
    Ok(adapter_components(cfg)?.iter().map(|(_, n)| n).sum())
}

pub fn vanilla_param_count(channels: usize, alpha: usize) -> Result<usize> {
    AdapterConfig::new(channels, alpha).validate()?;
    let m = channels / alpha;
    Ok(nn::dense_count(channels, m) + nn::dense_count(m, channels))
}

fn trunc(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    Tensor::new(
        shape,
        Fill::TruncatedNormal {
            rng,
            mean: 0.0,
            std: INIT_STD,
        },
    )
}

fn projection(
    store: &mut ParamStore,
    name: &str,
    role: Role,
    d_in: usize,
    d_out: usize,
    rng: &mut Rng,
    zero_weight: bool,
) -> Result<Dense<ParamId>> {
    let w = if zero_weight {
        Tensor::zeros(&[d_in, d_out])?
    } else {
        trunc(&[d_in, d_out], &mut rng.derive(name))?
    };
    Ok(Dense {
        weight: store.add(format!("{name}.weight"), role, w)?,
        bias: store.add(format!("{name}.bias"), role, Tensor::zeros(&[d_out])?)?,
    })
}

fn kernel_pair(
    store: &mut ParamStore,
    name: &str,
    m: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<DepthwiseKernelPair<ParamId>> {
    let mut r = rng.derive(name);
    let bs = 1.0 / (k as f32);
    let bd = 1.0 / (k as f32).sqrt();
    let spatial = Tensor::new(
        &[m, 1, k, k],
        Fill::Uniform {
            rng: &mut r,
            lo: -bs,
            hi: bs,
        },
    )?;
    let depth = Tensor::new(
        &[m, k, 1, 1],
        Fill::Uniform {
            rng: &mut r,
            lo: -bd,
            hi: bd,
        },
    )?;
    Ok(DepthwiseKernelPair {
        spatial: store.add(format!("{name}.spatial"), Role::Adapter, spatial)?,
        depth: store.add(format!("{name}.depth"), Role::Adapter, depth)?,
        bias_spatial: store.add(format!("{name}.bias_spatial"), Role::Adapter, Tensor::zeros(&[m])?)?,
        bias_depth: store.add(format!("{name}.bias_depth"), Role::Adapter, Tensor::zeros(&[m])?)?,
        k,
    })
}

/// Allocates the parameters of one Med-Adapter under `prefix`.
///
/// Projections are truncated-normal (std 0.02); `W_up` and every bias are
/// zero, so the adapter starts as the identity; depthwise kernels are
/// uniform in `±1/√fan_in`; spectral weights start at `1+0j` with zero bias.
pub fn allocate_adapter(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AdapterConfig,
    rng: &mut Rng,
) -> Result<AdapterParams<ParamId>> {
    cfg.validate()?;
    let (c, m) = (cfg.channels, cfg.bottleneck());
    let r = Role::Adapter;
    let down = projection(store, &format!("{prefix}.down"), r, c, m, rng, false)?;
    let up = projection(store, &format!("{prefix}.up"), r, m, c, rng, true)?;
    let b = cfg.branches;
    let pair3 = b
        .conv3
        .then(|| kernel_pair(store, &format!("{prefix}.conv3"), m, 3, rng))
        .transpose()?;
    let pair5 = b
        .conv5
        .then(|| kernel_pair(store, &format!("{prefix}.conv5"), m, 5, rng))
        .transpose()?;
    let spectral = if b.fft {
        let mut w = vec![0.0; 2 * m];
        w.iter_mut().step_by(2).for_each(|v| *v = 1.0);
        let w = store.add(format!("{prefix}.fft.w"), r, Tensor::from_vec(&[m, 2], w)?)?;
        let bias = cfg
            .fft_bias
            .then(|| store.add(format!("{prefix}.fft.b"), r, Tensor::zeros(&[m, 2])?))
            .transpose()?;
        Some(SpectralWeights { w, b: bias })
    } else {
        None
    };
    let mix = b
        .channel_mix
        .then(|| projection(store, &format!("{prefix}.mix"), r, m, m, rng, false))
        .transpose()?;
    let (align, fuse) = if cfg.has_inter_params() {
        let prev = cfg.prev_channels.expect("checked by has_inter_params");
        let align = projection(store, &format!("{prefix}.align"), r, prev, m, rng, false)?;
        let fuse = (cfg.inter_mode == InterMode::Concat)
            .then(|| projection(store, &format!("{prefix}.fuse"), r, 2 * m, m, rng, false))
            .transpose()?;
        (Some(align), fuse)
    } else {
        (None, None)
    };
    Ok(AdapterParams {
        down,
        up,
        pair3,
        pair5,
        spectral,
        mix,
        align,
        fuse,
    })
}

pub fn allocate_vanilla(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    alpha: usize,
    rng: &mut Rng,
) -> Result<VanillaAdapterParams<ParamId>> {
    AdapterConfig::new(channels, alpha).validate()?;
    let m = channels / alpha;
    Ok(VanillaAdapterParams {
        down: projection(store, &format!("{prefix}.down"), Role::Adapter, channels, m, rng, false)?,
        up: projection(store, &format!("{prefix}.up"), Role::Adapter, m, channels, rng, true)?,
    })
}

/// `x + σ(x·W_down + b_down)·W_up + b_up` over the last axis.
pub fn vanilla_adapter(tape: &mut Tape, x: Var, p: &VanillaAdapterParams<Var>, act: Activation) -> Result<Var> {
    let h = nn::linear(tape, x, p.down)?;
    let h = act.apply(tape, h)?;
    let h = nn::linear(tape, h, p.up)?;
    tape.add(x, h)
}

fn check_tokens(op: &'static str, shape: &[usize], g: &VolumeGeometry) -> Result<()> {
    if shape.len() != 3 || shape[0] != g.batch * g.depth || shape[1] != g.height * g.width {
        return Err(Error::InvalidShape(format!(
            "{op}: tokens {shape:?} inconsistent with geometry B={} D={} H={} W={}",
            g.batch, g.depth, g.height, g.width
        )));
    }
    Ok(())
}

/// `X' = σ(X·W_down)` reshaped from `[B·D, H·W, C']` tokens to the
/// `[B, C', D, H, W]` volume layout.
pub fn project_down(tape: &mut Tape, x: Var, geom: &VolumeGeometry, down: Dense<Var>, act: Activation) -> Result<Var> {
    tape.check(x)?;
    check_tokens("project_down", tape.shape(x), geom)?;
    let h = nn::linear(tape, x, down)?;
    let h = act.apply(tape, h)?;
    let m = tape.shape(h)[2];
    let h = tape.reshape(h, &[geom.batch, geom.depth, geom.height, geom.width, m])?;
    tape.permute(h, &[0, 4, 1, 2, 3])
}

/// Inverse of the volume reshape in [`project_down`]:
/// `[B, C', D, H, W] → [B·D, H·W, C']`.
pub fn volume_to_tokens(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 5 {
        return Err(Error::InvalidShape(format!("expected [B, C, D, H, W], got {s:?}")));
    }
    let p = tape.permute(v, &[0, 2, 3, 4, 1])?;
    tape.reshape(p, &[s[0] * s[2], s[3] * s[4], s[1]])
}

/// `Mix(DWConv₃(X') + DWConv₅(X') + F(X'))` over the enabled branches.
pub fn intra_fe(tape: &mut Tape, xp: Var, p: &AdapterParams<Var>, cfg: &AdapterConfig) -> Result<Var> {
    let b = cfg.branches;
    if !b.any_feature() {
        return Err(Error::Config("intra_fe needs at least one feature branch".into()));
    }
    let mut parts = Vec::with_capacity(3);
    if b.conv3 {
        let pair = p
            .pair3
            .ok_or_else(|| Error::Config("conv3 branch has no parameters".into()))?;
        parts.push(nn::dwconv_cascade(tape, xp, pair)?);
    }
    if b.conv5 {
        let pair = p
            .pair5
            .ok_or_else(|| Error::Config("conv5 branch has no parameters".into()))?;
        parts.push(nn::dwconv_cascade(tape, xp, pair)?);
    }
    if b.fft {
        let w = p
            .spectral
            .ok_or_else(|| Error::Config("fft branch has no parameters".into()))?;
        parts.push(spectral_filter(tape, xp, w)?);
    }
    let mut h = parts[0];
    for &q in &parts[1..] {
        h = tape.add(h, q)?;
    }
    if b.channel_mix {
        let mix = p
            .mix
            .ok_or_else(|| Error::Config("channel mix has no parameters".into()))?;
        h = nn::conv3d_pointwise(tape, h, mix)?;
    }
    Ok(h)
}

/// Fuses the previous stage's enhanced feature into `h`.
pub fn inter_fi(
    tape: &mut Tape,
    h: Var,
    state: &StageState,
    p: &AdapterParams<Var>,
    cfg: &AdapterConfig,
) -> Result<Var> {
    if !cfg.is_stage_last || cfg.inter_mode == InterMode::None {
        return Err(Error::Config(
            "inter_fi needs a stage-last adapter with a fusion mode".into(),
        ));
    }
    let Some(prev) = state.h_last else {
        return Ok(h);
    };
    let align = p
        .align
        .ok_or_else(|| Error::Config("inter_fi: previous stage present but no alignment parameters".into()))?;
    let hs = tape.shape(h).to_vec();
    let ps = tape.shape(prev).to_vec();
    if ps.len() != 5 || ps[0] != hs[0] || ps[2] != hs[2] {
        return Err(Error::Geometry(format!(
            "inter_fi: previous feature {ps:?} incompatible with {hs:?}"
        )));
    }
    let ratio = |a: usize, b: usize| (a % b == 0).then(|| a / b);
    let (rh, rw) = (ratio(ps[3], hs[3]), ratio(ps[4], hs[4]));
    let stride = match (rh, rw) {
        (Some(1), Some(1)) => 1,
        (Some(2), Some(2)) => 2,
        _ => {
            return Err(Error::Geometry(format!(
                "inter_fi: resolution ratio {}x{} -> {}x{} is not 1 or 2",
                ps[3], ps[4], hs[3], hs[4]
            )))
        }
    };
    let sub = if stride == 2 {
        nn::subsample_hw(tape, prev, 2)?
    } else {
        prev
    };
    let aligned = nn::conv3d_pointwise(tape, sub, align)?;
    match cfg.inter_mode {
        InterMode::Add => tape.add(h, aligned),
        InterMode::Max => tape.maximum(h, aligned),
        InterMode::Concat => {
            let fuse = p
                .fuse
                .ok_or_else(|| Error::Config("inter_fi: concat mode without fuse parameters".into()))?;
            let cat = tape.concat(&[h, aligned], 1)?;
            nn::conv3d_pointwise(tape, cat, fuse)
        }
        InterMode::None => unreachable!("rejected above"),
    }
}

/// `X + σ(Reshape(H + X')·W_up)` with `X' = project_down(X)` and
/// `H = intra_fe(X')`, fused with the previous stage on a stage-last adapter.
///
/// The returned state carries this adapter's `H` when it is stage-last and
/// is passed through unchanged otherwise.
pub fn med_adapter_forward(
    tape: &mut Tape,
    x: Var,
    geom: &VolumeGeometry,
    p: &AdapterParams<Var>,
    cfg: &AdapterConfig,
    state: StageState,
) -> Result<(Var, StageState)> {
    let xp = project_down(tape, x, geom, p.down, cfg.activation)?;
    let mut h = intra_fe(tape, xp, p, cfg)?;
    let mut next = state;
    if cfg.is_stage_last {
        if cfg.inter_mode != InterMode::None {
            h = inter_fi(tape, h, &state, p, cfg)?;
        }
        next = StageState { h_last: Some(h) };
    }
    let s = tape.add(h, xp)?;
    let tokens = volume_to_tokens(tape, s)?;
    let up = nn::linear(tape, tokens, p.up)?;
    let up = cfg.activation.apply(tape, up)?;
    Ok((tape.add(x, up)?, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn bind(store: &ParamStore, tape: &mut Tape) -> Vec<Var> {
        store.bind(tape).vars().to_vec()
    }

    fn rand_tokens(shape: &[usize], seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::new(
            shape,
            Fill::Uniform {
                rng: &mut r,
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap()
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = Rng::new(seed);
        for e in store.entries_mut() {
            for v in e.tensor.data_mut() {
                *v = r.uniform(-0.5, 0.5) as f32;
            }
            e.tensor.set_trainable(true);
        }
    }

    #[test]
    fn param_count_example_and_enumeration() {
        let mut cfg = AdapterConfig::new(96, 4);
        cfg.branches = Branches {
            fft: true,
            ..Branches::NONE
        };
        assert_eq!(adapter_param_count(&cfg).unwrap(), 4776);
        let mut store = ParamStore::new();
        allocate_adapter(&mut store, "a", &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(store.total(), 4776);

        let mut cfg = AdapterConfig::new(16, 2);
        cfg.is_stage_last = true;
        cfg.inter_mode = InterMode::Concat;
        cfg.prev_channels = Some(4);
        cfg.fft_bias = true;
        let mut store = ParamStore::new();
        allocate_adapter(&mut store, "a", &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(store.total(), adapter_param_count(&cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(AdapterConfig::new(10, 3).validate().is_err());
        assert!(AdapterConfig::new(10, 0).validate().is_err());
        let mut c = AdapterConfig::new(8, 2);
        c.inter_mode = InterMode::Add;
        assert!(c.validate().is_err());
        c.is_stage_last = true;
        assert!(c.validate().is_ok());
        c.branches = Branches {
            channel_mix: true,
            ..Branches::NONE
        };
        assert!(matches!(adapter_param_count(&c), Err(Error::Config(_))));
        assert_eq!(
            Branches::parse("conv3,fft").unwrap(),
            Branches {
                conv3: true,
                fft: true,
                ..Branches::NONE
            }
        );
        assert!(Branches::parse("conv7").is_err());
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let geom = VolumeGeometry {
            batch: 1,
            depth: 2,
            height: 2,
            width: 2,
        };
        for mode in [InterMode::None, InterMode::Add, InterMode::Max, InterMode::Concat] {
            let mut cfg = AdapterConfig::new(8, 2);
            cfg.is_stage_last = mode != InterMode::None;
            cfg.inter_mode = mode;
            cfg.prev_channels = cfg.is_stage_last.then_some(4);
            let mut store = ParamStore::new();
            let p = allocate_adapter(&mut store, "a", &cfg, &mut Rng::new(1)).unwrap();
            randomize(&mut store, 2);
            for id in [p.up.weight, p.up.bias] {
                store.get_mut(id).data_mut().fill(0.0);
            }
            let x = rand_tokens(&[2, 4, 8], 3);
            let mut tape = Tape::new();
            let vars = bind(&store, &mut tape);
            let pv = p.map(|id| vars[id.index()]);
            let xv = tape.leaf(&x);
            let prev = tape.leaf(&rand_tokens(&[1, 4, 2, 2, 2], 4));
            let state = StageState {
                h_last: cfg.is_stage_last.then_some(prev),
            };
            let (y, next) = med_adapter_forward(&mut tape, xv, &geom, &pv, &cfg, state).unwrap();
            assert_eq!(tape.data(y), x.data());
            assert_eq!(next.h_last.is_some(), cfg.is_stage_last);
        }
    }

    #[test]
    fn single_branch_identities() {
        let mut rng = Rng::new(5);
        let xp = rand_tokens(&[1, 2, 3, 4, 4], 6);
        for branches in [
            Branches {
                conv3: true,
                ..Branches::NONE
            },
            Branches {
                fft: true,
                ..Branches::NONE
            },
        ] {
            let mut cfg = AdapterConfig::new(4, 2);
            cfg.branches = branches;
            let mut store = ParamStore::new();
            let p = allocate_adapter(&mut store, "a", &cfg, &mut rng).unwrap();
            if let Some(pair) = p.pair3 {
                for (id, centre) in [(pair.spatial, 4), (pair.depth, 1)] {
                    let t = store.get_mut(id);
                    let ksz = t.len() / 2;
                    t.data_mut().fill(0.0);
                    t.data_mut()[centre] = 1.0;
                    t.data_mut()[ksz + centre] = 1.0;
                }
            }
            let mut tape = Tape::new();
            let vars = bind(&store, &mut tape);
            let pv = p.map(|id| vars[id.index()]);
            let xv = tape.leaf(&xp);
            let h = intra_fe(&mut tape, xv, &pv, &cfg).unwrap();
            assert!(tape.value(h).max_abs_diff(&xp) < 1e-5);
        }
    }

    #[test]
    fn inter_fi_first_stage_and_zero_align() {
        let mut cfg = AdapterConfig::new(4, 2);
        cfg.is_stage_last = true;
        cfg.inter_mode = InterMode::Add;
        cfg.prev_channels = Some(4);
        let mut store = ParamStore::new();
        let p = allocate_adapter(&mut store, "a", &cfg, &mut Rng::new(7)).unwrap();
        store.get_mut(p.align.unwrap().weight).data_mut().fill(0.0);
        let h = rand_tokens(&[1, 2, 2, 2, 2], 8);
        let mut tape = Tape::new();
        let vars = bind(&store, &mut tape);
        let pv = p.map(|id| vars[id.index()]);
        let hv = tape.leaf(&h);
        let out = inter_fi(&mut tape, hv, &StageState::default(), &pv, &cfg).unwrap();
        assert_eq!(out, hv);
        let prev = tape.leaf(&rand_tokens(&[1, 4, 2, 4, 4], 9));
        let out = inter_fi(&mut tape, hv, &StageState { h_last: Some(prev) }, &pv, &cfg).unwrap();
        assert_eq!(tape.data(out), h.data());
        let bad = tape.leaf(&rand_tokens(&[1, 4, 2, 6, 6], 9));
        assert!(matches!(
            inter_fi(&mut tape, hv, &StageState { h_last: Some(bad) }, &pv, &cfg),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn inter_fi_concat_hand_case() {
        // C' = 1 current, 1 previous; one voxel.
        let mut cfg = AdapterConfig::new(2, 2);
        cfg.is_stage_last = true;
        cfg.inter_mode = InterMode::Concat;
        cfg.prev_channels = Some(1);
        let mut store = ParamStore::new();
        let p = allocate_adapter(&mut store, "a", &cfg, &mut Rng::new(0)).unwrap();
        let (al, fu) = (p.align.unwrap(), p.fuse.unwrap());
        store.get_mut(al.weight).data_mut().copy_from_slice(&[2.0]);
        store.get_mut(al.bias).data_mut().copy_from_slice(&[0.5]);
        store.get_mut(fu.weight).data_mut().copy_from_slice(&[3.0, -1.0]);
        store.get_mut(fu.bias).data_mut().copy_from_slice(&[0.25]);
        let mut tape = Tape::new();
        let vars = bind(&store, &mut tape);
        let pv = p.map(|id| vars[id.index()]);
        let h = tape.leaf(&Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.5]).unwrap());
        let prev = tape.leaf(&Tensor::from_vec(&[1, 1, 1, 1, 1], vec![-2.0]).unwrap());
        let out = inter_fi(&mut tape, h, &StageState { h_last: Some(prev) }, &pv, &cfg).unwrap();
        // aligned = 2·(−2) + 0.5 = −3.5; fused = 3·1.5 − (−3.5) + 0.25
        assert_eq!(tape.data(out), &[8.25]);
    }

    #[test]
    fn vanilla_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[1, 2], vec![1.0, -0.5]).unwrap());
        let c = |t: &mut Tape, s: &[usize], d: Vec<f32>| t.leaf(&Tensor::from_vec(s, d).unwrap());
        let p = VanillaAdapterParams {
            down: Dense {
                weight: c(&mut tape, &[2, 1], vec![0.5, 1.0]),
                bias: c(&mut tape, &[1], vec![0.0]),
            },
            up: Dense {
                weight: c(&mut tape, &[1, 2], vec![2.0, -1.0]),
                bias: c(&mut tape, &[2], vec![0.0, 0.0]),
            },
        };
        let y = vanilla_adapter(&mut tape, x, &p, Activation::Relu).unwrap();
        // hidden = relu(0.5 − 0.5) = 0 → identity
        assert_eq!(tape.data(y), &[1.0, -0.5]);
        let x2 = tape.leaf(&Tensor::from_vec(&[1, 2], vec![2.0, 1.0]).unwrap());
        let y = vanilla_adapter(&mut tape, x2, &p, Activation::Relu).unwrap();
        // hidden = relu(1 + 1) = 2 → x + [4, −2]
        assert_eq!(tape.data(y), &[6.0, -1.0]);
    }

    #[test]
    fn gradient_through_full_adapter() {
        let geom = VolumeGeometry {
            batch: 1,
            depth: 2,
            height: 2,
            width: 2,
        };
        let mut cfg = AdapterConfig::new(4, 2);
        cfg.is_stage_last = true;
        cfg.inter_mode = InterMode::Concat;
        cfg.prev_channels = Some(2);
        cfg.fft_bias = true;
        let mut store = ParamStore::new();
        let p = allocate_adapter(&mut store, "a", &cfg, &mut Rng::new(1)).unwrap();
        randomize(&mut store, 11);
        let mut point: Vec<Tensor> = store.entries().iter().map(|e| e.tensor.clone()).collect();
        point.push(rand_tokens(&[2, 4, 4], 12).with_trainable(true));
        point.push(rand_tokens(&[1, 2, 2, 4, 4], 13).with_trainable(true));
        let n = store.len();
        let weights = rand_tokens(&[2, 4, 4], 14);
        let err = grad_check(
            |tape, v| {
                let pv = p.map(|id| v[id.index()]);
                let state = StageState { h_last: Some(v[n + 1]) };
                let (y, _) = med_adapter_forward(tape, v[n], &geom, &pv, &cfg, state)?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(y, w)?;
                tape.sum_all(prod)
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "{err}");
    }
}
