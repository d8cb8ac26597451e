//! Gradient audit and numerical self-test suites.

use serde::Serialize;

use crate::adapter::{self, AdapterConfig, AdapterParams, InterMode, StageState, VolumeGeometry};
use crate::autodiff::{grad_check, Tape, Var};
use crate::error::{Error, Result};
use crate::loss;
use crate::metrics::{dice_score, hausdorff95, LabelVolume, Mask};
use crate::model::{build_model, AdapterTemplate, BackboneConfig, Task, TuningMode};
use crate::nn::{self, AttentionBlockParams, Dense, DepthwiseKernelPair, LayerNormParams};
use crate::oracle;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::spectral::{dft1d_reference, fft1d, fft3d, idft1d_reference, ifft1d, ifft3d, ComplexField, SpectralWeights};
use crate::tensor::{Fill, Tensor};

pub const GRAD_EPS: f32 = 1e-3;
pub const GRAD_TOL: f64 = 1e-2;
pub const FFT_TOL: f64 = 1e-4;
pub const PARSEVAL_TOL: f64 = 1e-3;
pub const CONV_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    /// Passes when `value < tolerance`, or `value == 0` for a zero tolerance.
    pub fn new(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        let passed = if tolerance == 0.0 {
            value == 0.0
        } else {
            value < tolerance
        };
        CheckOutcome {
            suite,
            name: name.into(),
            value,
            tolerance,
            passed,
        }
    }

    fn failed(suite: &'static str, name: impl Into<String>, err: &Error) -> Self {
        CheckOutcome {
            suite,
            name: format!("{} ({err})", name.into()),
            value: f64::INFINITY,
            tolerance: 0.0,
            passed: false,
        }
    }
}

fn uniform(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::new(shape, Fill::Uniform { rng, lo, hi }).expect("valid shape")
}

fn input(shape: &[usize], rng: &mut Rng) -> Tensor {
    uniform(shape, rng, -1.0, 1.0).with_trainable(true)
}

/// Projects `y` onto fixed pseudo-random weights scaled by `1/√n`, giving an
/// O(1) scalar whose gradient reaches every output coordinate.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    if n == 1 {
        return Ok(y);
    }
    let mut r = Rng::new(0x5eed);
    let w = uniform(tape.shape(y), &mut r, -1.0, 1.0);
    let scale = 1.0 / (n as f32).sqrt();
    let c = tape.constant(w);
    let m = tape.mul(y, c)?;
    let s = tape.sum_all(m)?;
    tape.scale(s, scale)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct GradCase {
    name: String,
    point: Vec<Tensor>,
    build: Build,
}

fn case(name: &str, point: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name: name.to_string(),
        point,
        build: Box::new(build),
    }
}

fn randomized(store: &ParamStore, rng: &mut Rng) -> Vec<Tensor> {
    store
        .entries()
        .iter()
        .map(|e| uniform(e.tensor.shape(), rng, -0.5, 0.5).with_trainable(true))
        .collect()
}

fn dense_point(d_in: usize, d_out: usize, rng: &mut Rng) -> [Tensor; 2] {
    [input(&[d_in, d_out], rng), input(&[d_out], rng)]
}

fn primitive_cases(rng: &mut Rng) -> Vec<GradCase> {
    let a = input(&[3, 4], rng);
    let b = input(&[3, 4], rng);
    let mut far = b.clone();
    for (x, y) in far.data_mut().iter_mut().zip(a.data()) {
        if (*x - y).abs() < 0.05 {
            *x += 0.2;
        }
    }
    let mut sign_safe = input(&[3, 4], rng);
    for x in sign_safe.data_mut() {
        if x.abs() < 0.05 {
            *x = 0.3;
        }
    }
    vec![
        case("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        case("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        case("maximum", vec![a.clone(), far], |t, v| t.maximum(v[0], v[1])),
        case("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7)),
        case("matmul", vec![a.clone(), input(&[4, 5], rng)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case(
            "matmul_batched",
            vec![input(&[2, 3, 4], rng), input(&[2, 4, 2], rng)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6])),
        case("permute", vec![input(&[2, 3, 4], rng)], |t, v| {
            t.permute(v[0], &[2, 0, 1])
        }),
        case("concat", vec![a.clone(), input(&[3, 2], rng)], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        case("slice", vec![input(&[4, 5], rng)], |t, v| t.slice(v[0], 1, 1, 3)),
        case("sum", vec![input(&[2, 3, 4], rng)], |t, v| t.sum(v[0], &[1])),
        case("mean", vec![input(&[2, 3, 4], rng)], |t, v| t.mean(v[0], &[0, 2])),
        case("relu", vec![sign_safe.clone()], |t, v| t.relu(v[0])),
        case("gelu", vec![a.clone()], |t, v| t.gelu(v[0])),
        case("softmax", vec![input(&[3, 5], rng)], |t, v| t.softmax(v[0], 1)),
        case("layer_norm", vec![input(&[3, 6], rng)], |t, v| {
            t.layer_norm(v[0], None, 1, nn::LN_EPS)
        }),
        case(
            "layer_norm_affine",
            vec![input(&[2, 3, 6], rng), input(&[6], rng), input(&[6], rng)],
            |t, v| t.layer_norm(v[0], Some((v[1], v[2])), 2, nn::LN_EPS),
        ),
        case("pad", vec![input(&[2, 3], rng)], |t, v| t.pad(v[0], &[(1, 0), (0, 2)])),
        case("embed_lookup", vec![input(&[4, 3], rng)], |t, v| {
            t.embed_lookup(v[0], &[2, 0, 2, 3])
        }),
    ]
}

fn pair(c: usize, k: usize, rng: &mut Rng) -> [Tensor; 4] {
    [
        input(&[c, 1, k, k], rng),
        input(&[c, k, 1, 1], rng),
        input(&[c], rng),
        input(&[c], rng),
    ]
}

fn pair_vars(v: &[Var], k: usize) -> DepthwiseKernelPair<Var> {
    DepthwiseKernelPair {
        spatial: v[0],
        depth: v[1],
        bias_spatial: v[2],
        bias_depth: v[3],
        k,
    }
}

fn dense_vars(v: &[Var]) -> Dense<Var> {
    Dense {
        weight: v[0],
        bias: v[1],
    }
}

fn nn_cases(rng: &mut Rng) -> Vec<GradCase> {
    let vol = |rng: &mut Rng| input(&[1, 2, 3, 4, 4], rng);
    let mut out = vec![
        case(
            "linear",
            [vec![input(&[2, 3, 4], rng)], dense_point(4, 5, rng).to_vec()].concat(),
            |t, v| nn::linear(t, v[0], dense_vars(&v[1..])),
        ),
        case(
            "dwconv3d_spatial",
            vec![vol(rng), input(&[2, 1, 3, 3], rng), input(&[2], rng)],
            |t, v| nn::dwconv3d_single(t, v[0], v[1], v[2]),
        ),
        case(
            "dwconv3d_depth",
            vec![vol(rng), input(&[2, 3, 1, 1], rng), input(&[2], rng)],
            |t, v| nn::dwconv3d_single(t, v[0], v[1], v[2]),
        ),
    ];
    for k in [3, 5] {
        out.push(case(
            &format!("dwconv_cascade_k{k}"),
            [vec![vol(rng)], pair(2, k, rng).to_vec()].concat(),
            move |t, v| nn::dwconv_cascade(t, v[0], pair_vars(&v[1..], k)),
        ));
    }
    out.extend([
        case(
            "conv3d_pointwise",
            [vec![vol(rng)], dense_point(2, 3, rng).to_vec()].concat(),
            |t, v| nn::conv3d_pointwise(t, v[0], dense_vars(&v[1..])),
        ),
        case("subsample_hw", vec![vol(rng)], |t, v| nn::subsample_hw(t, v[0], 2)),
        case("upsample_nearest", vec![input(&[2, 2, 3, 3], rng)], |t, v| {
            nn::upsample_nearest(t, v[0], 2)
        }),
        case(
            "patch_embed2d",
            [vec![input(&[2, 1, 4, 4], rng)], dense_point(4, 3, rng).to_vec()].concat(),
            |t, v| nn::patch_embed2d(t, v[0], 2, dense_vars(&v[1..])),
        ),
    ]);
    let d = 4;
    let mut block = vec![input(&[2, 3, d], rng)];
    block.extend([input(&[d], rng), input(&[d], rng)]);
    block.extend(dense_point(d, 3 * d, rng));
    block.extend(dense_point(d, d, rng));
    block.extend([input(&[d], rng), input(&[d], rng)]);
    block.extend(dense_point(d, 2 * d, rng));
    block.extend(dense_point(2 * d, d, rng));
    out.push(case("attention_block", block, move |t, v| {
        let p = AttentionBlockParams {
            norm1: LayerNormParams {
                gamma: v[1],
                beta: v[2],
            },
            qkv: dense_vars(&v[3..]),
            proj: dense_vars(&v[5..]),
            norm2: LayerNormParams {
                gamma: v[7],
                beta: v[8],
            },
            fc1: dense_vars(&v[9..]),
            fc2: dense_vars(&v[11..]),
            heads: 2,
        };
        nn::attention_block(t, v[0], &p)
    }));
    out.push(case(
        "patch_merge",
        [vec![input(&[1, 16, 2], rng)], dense_point(8, 4, rng).to_vec()].concat(),
        |t, v| nn::patch_merge(t, v[0], (4, 4), dense_vars(&v[1..])),
    ));
    out
}

fn spectral_cases(rng: &mut Rng) -> Vec<GradCase> {
    let shape = [1, 2, 2, 3, 4];
    vec![
        case(
            "spectral_filter",
            vec![input(&shape, rng), input(&[2, 2], rng)],
            |t, v| crate::spectral::spectral_filter(t, v[0], SpectralWeights { w: v[1], b: None }),
        ),
        case(
            "spectral_filter_bias",
            vec![input(&shape, rng), input(&[2, 2], rng), input(&[2, 2], rng)],
            |t, v| crate::spectral::spectral_filter(t, v[0], SpectralWeights { w: v[1], b: Some(v[2]) }),
        ),
    ]
}

struct AdapterFixture {
    cfg: AdapterConfig,
    params: AdapterParams<ParamId>,
    point: Vec<Tensor>,
}

fn adapter_fixture(cfg: AdapterConfig, rng: &mut Rng) -> Result<AdapterFixture> {
    let mut store = ParamStore::new();
    let params = adapter::allocate_adapter(&mut store, "audit", &cfg, rng)?;
    let point = randomized(&store, rng);
    Ok(AdapterFixture { cfg, params, point })
}

fn adapter_cases(rng: &mut Rng) -> Result<Vec<GradCase>> {
    let geom = VolumeGeometry {
        batch: 1,
        depth: 2,
        height: 2,
        width: 2,
    };
    let mut out = Vec::new();

    let mut vstore = ParamStore::new();
    let vp = adapter::allocate_vanilla(&mut vstore, "audit", 4, 2, rng)?;
    let mut point = randomized(&vstore, rng);
    point.push(input(&[2, 3, 4], rng));
    let n = vstore.len();
    out.push(case("vanilla_adapter", point, move |t, v| {
        adapter::vanilla_adapter(t, v[n], &vp.map(|id| v[id.index()]), nn::Activation::Gelu)
    }));

    let f = adapter_fixture(AdapterConfig::new(4, 2), rng)?;
    let n = f.point.len();
    let mut point = f.point;
    point.push(input(&[1, 2, 2, 2, 2], rng));
    out.push(case("intra_fe", point, move |t, v| {
        adapter::intra_fe(t, v[n], &f.params.map(|id| v[id.index()]), &f.cfg)
    }));

    for mode in [InterMode::Add, InterMode::Max, InterMode::Concat] {
        let mut cfg = AdapterConfig::new(4, 2);
        cfg.is_stage_last = true;
        cfg.inter_mode = mode;
        cfg.prev_channels = Some(3);
        let f = adapter_fixture(cfg, rng)?;
        let n = f.point.len();
        let mut point = f.point;
        point.push(input(&[1, 2, 2, 2, 2], rng));
        point.push(input(&[1, 3, 2, 4, 4], rng));
        out.push(case(&format!("inter_fi_{}", mode.as_str()), point, move |t, v| {
            let state = StageState { h_last: Some(v[n + 1]) };
            adapter::inter_fi(t, v[n], &state, &f.params.map(|id| v[id.index()]), &f.cfg)
        }));
    }

    let mut cfg = AdapterConfig::new(4, 2);
    cfg.is_stage_last = true;
    cfg.inter_mode = InterMode::Concat;
    cfg.prev_channels = Some(2);
    cfg.fft_bias = true;
    let f = adapter_fixture(cfg, rng)?;
    let n = f.point.len();
    let mut point = f.point;
    point.push(input(&[2, 4, 4], rng));
    point.push(input(&[1, 2, 2, 4, 4], rng));
    out.push(case("med_adapter_forward", point, move |t, v| {
        let state = StageState { h_last: Some(v[n + 1]) };
        let (y, next) = adapter::med_adapter_forward(t, v[n], &geom, &f.params.map(|id| v[id.index()]), &f.cfg, state)?;
        let h = next.h_last.expect("stage-last adapter returns its feature");
        let a = project(t, y)?;
        let b = project(t, h)?;
        t.add(a, b)
    }));
    Ok(out)
}

fn loss_cases(rng: &mut Rng) -> Vec<GradCase> {
    let labels: Vec<u8> = (0..2 * 8).map(|_| rng.below(3) as u8).collect();
    let (l1, l2, l3) = (labels.clone(), labels.clone(), labels);
    let z = || input(&[2, 3, 2, 2, 2], &mut Rng::new(77));
    vec![
        case("cross_entropy", vec![z()], move |t, v| {
            loss::cross_entropy(t, v[0], &l1)
        }),
        case("soft_dice", vec![z()], move |t, v| loss::soft_dice(t, v[0], &l2)),
        case("composite_loss", vec![z()], move |t, v| {
            loss::composite_loss(t, v[0], &l3, 0.5, 0.5)
        }),
    ]
}

/// Small backbone used by the end-to-end audits.
pub fn audit_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_dims: vec![8, 8],
        stage_depths: vec![1, 1],
        heads: vec![2, 2],
        patch: 2,
        mlp_ratio: 2,
        image_size: 8,
        ..BackboneConfig::default()
    }
}

fn model_cases(rng: &mut Rng) -> Result<Vec<GradCase>> {
    let template = AdapterTemplate {
        alpha: 2,
        fft_bias: true,
        ..AdapterTemplate::default()
    };
    let seg = build_model(
        &audit_backbone(),
        &template,
        TuningMode::MedTuning,
        Task::Segment { classes: 3 },
        rng,
    )?;
    let mut point = randomized(&seg.store, rng);
    let n = point.len();
    point.push(input(&[1, 1, 4, 8, 8], rng));
    let mut out = vec![case("segment_forward_1x1x4x8x8", point, move |t, v| {
        seg.segment_forward(t, &Binding::from_vars(v[..n].to_vec()), v[n])
    })];

    let cls = build_model(
        &audit_backbone(),
        &template,
        TuningMode::Scratch,
        Task::Classify { classes: 4 },
        rng,
    )?;
    let mut point = randomized(&cls.store, rng);
    let n = point.len();
    point.push(input(&[2, 1, 8, 8], rng));
    out.push(case("classify_forward", point, move |t, v| {
        cls.classify_forward(t, &Binding::from_vars(v[..n].to_vec()), v[n])
    }));
    Ok(out)
}

/// Names of every audited operation, in audit order.
pub fn gradient_audit_names() -> Result<Vec<String>> {
    Ok(all_cases()?.into_iter().map(|c| c.name).collect())
}

fn all_cases() -> Result<Vec<GradCase>> {
    let mut rng = Rng::new(2024);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(nn_cases(&mut rng));
    cases.extend(spectral_cases(&mut rng));
    cases.extend(adapter_cases(&mut rng)?);
    cases.extend(loss_cases(&mut rng));
    cases.extend(model_cases(&mut rng)?);
    Ok(cases)
}

/// Central-difference check of every differentiable operation.
pub fn gradient_audit() -> Result<Vec<CheckOutcome>> {
    Ok(all_cases()?
        .into_iter()
        .map(|c| {
            let build = &c.build;
            match grad_check(
                |t, v| {
                    let y = build(t, v)?;
                    project(t, y)
                },
                &c.point,
                GRAD_EPS,
            ) {
                Ok(e) => CheckOutcome::new("grad", c.name, f64::from(e), GRAD_TOL),
                Err(e) => CheckOutcome::failed("grad", c.name, &e),
            }
        })
        .collect())
}

fn random_field(shape: &[usize], rng: &mut Rng) -> ComplexField {
    let n = shape.iter().product();
    let re = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let im = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    ComplexField::new(shape, re, im).expect("valid shape")
}

/// Fast 1D and 3D transforms against direct sums.
pub fn fft_oracle_suite(rng: &mut Rng) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for n in [2, 3, 4, 5, 8, 16] {
        let x = random_field(&[n], rng);
        let fwd = fft1d(&x)?.max_abs_diff(&dft1d_reference(&x)?);
        let inv = ifft1d(&x)?.max_abs_diff(&idft1d_reference(&x)?);
        out.push(CheckOutcome::new("fft", format!("fft1d n={n}"), fwd.max(inv), FFT_TOL));
    }
    for dims in [[2, 3, 4], [4, 4, 4], [5, 3, 2], [1, 6, 7], [8, 8, 8]] {
        let x = random_field(&dims, rng);
        let fwd = fft3d(&x)?.max_abs_diff(&oracle::dft3d_triple_sum(&x, -1.0));
        let inv = ifft3d(&x)?.max_abs_diff(&oracle::dft3d_triple_sum(&x, 1.0));
        out.push(CheckOutcome::new(
            "fft",
            format!("fft3d {dims:?}"),
            fwd.max(inv),
            FFT_TOL,
        ));
    }
    Ok(out)
}

/// `ifft3d(fft3d(x)) == x` and Parseval on `fields` random shapes up to 16³.
pub fn round_trip_suite(rng: &mut Rng, fields: usize) -> Result<Vec<CheckOutcome>> {
    let (mut worst_rt, mut worst_parseval) = (0.0f64, 0.0f64);
    for _ in 0..fields {
        let dims = [0; 3].map(|_| 1 + rng.below(16) as usize);
        let x = random_field(&dims, rng);
        let f = fft3d(&x)?;
        worst_rt = worst_rt.max(ifft3d(&f)?.max_abs_diff(&x));
        let n = x.len() as f64;
        let (ex, ef) = (x.energy(), f.energy() / n);
        worst_parseval = worst_parseval.max((ex - ef).abs() / ex);
    }
    Ok(vec![
        CheckOutcome::new("fft", format!("round trip x{fields}"), worst_rt, FFT_TOL),
        CheckOutcome::new("fft", format!("parseval x{fields}"), worst_parseval, PARSEVAL_TOL),
    ])
}

/// The factorized cascade against a full `K×K×K` depthwise convolution with
/// the outer-product kernel.
pub fn conv_oracle_suite(rng: &mut Rng, trials: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for k in [3, 5] {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let c = 1 + rng.below(3) as usize;
            let dims = [0; 3].map(|_| 1 + rng.below(7) as usize);
            let bound = 1.0 / k as f32;
            let x = uniform(&[1, c, dims[0], dims[1], dims[2]], rng, -1.0, 1.0);
            let spatial = uniform(&[c, 1, k, k], rng, -bound, bound);
            let depth = uniform(&[c, k, 1, 1], rng, -bound, bound);
            let bias = vec![0.0f64; c];
            let mut full = vec![0.0f64; c * k * k * k];
            for ch in 0..c {
                for i in 0..k {
                    for j in 0..k {
                        for l in 0..k {
                            full[((ch * k + i) * k + j) * k + l] =
                                f64::from(depth.data()[ch * k + i]) * f64::from(spatial.data()[(ch * k + j) * k + l]);
                        }
                    }
                }
            }
            let want = oracle::depthwise_conv3d(&x, &full, k, &bias);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let p = DepthwiseKernelPair {
                spatial: tape.constant(spatial),
                depth: tape.constant(depth),
                bias_spatial: tape.constant(Tensor::zeros(&[c])?),
                bias_depth: tape.constant(Tensor::zeros(&[c])?),
                k,
            };
            let y = nn::dwconv_cascade(&mut tape, xv, p)?;
            let got = tape.data(y);
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((f64::from(*g) - w).abs());
            }
        }
        out.push(CheckOutcome::new(
            "conv",
            format!("cascade k={k} x{trials}"),
            worst,
            CONV_TOL,
        ));
    }
    Ok(out)
}

fn random_mask(dims: [usize; 3], density: f64, rng: &mut Rng) -> Mask {
    let n = dims.iter().product();
    Mask::new(dims, (0..n).map(|_| rng.next_f64() < density).collect()).expect("valid dims")
}

/// HD95 against the all-pairs oracle and Dice/HD95 hand cases.
pub fn metric_oracle_suite(rng: &mut Rng, pairs: usize) -> Result<Vec<CheckOutcome>> {
    let mut mismatches = 0usize;
    let mut done = 0;
    while done < pairs {
        let dims = [0; 3].map(|_| 2 + rng.below(7) as usize);
        let (da, db) = (rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6));
        let (a, b) = (random_mask(dims, da, rng), random_mask(dims, db, rng));
        if oracle::boundary_len(&a) > 200 || oracle::boundary_len(&b) > 200 {
            continue;
        }
        let fast = hausdorff95(&a, &b)?;
        let slow = oracle::hausdorff95_brute(&a, &b);
        if fast != slow || hausdorff95(&b, &a)? != fast {
            mismatches += 1;
        }
        done += 1;
    }
    let mut out = vec![CheckOutcome::new(
        "metric",
        format!("hd95 vs brute force x{pairs}"),
        mismatches as f64,
        0.0,
    )];

    let dims = [1, 1, 8];
    let lv = |ones: &[usize]| {
        let mut d = vec![0u8; 8];
        for &i in ones {
            d[i] = 1;
        }
        LabelVolume::new(dims, d).expect("valid dims")
    };
    let a = lv(&[0, 1, 2, 3]);
    let b = lv(&[1, 2, 3, 4, 5, 6]);
    let cases = [
        ("dice |A|=4 |B|=6 |A∩B|=3", dice_score(&a, &b, 1)?, 0.6),
        ("dice identical", dice_score(&a, &a, 1)?, 1.0),
        ("dice disjoint", dice_score(&lv(&[0, 1]), &lv(&[5, 6]), 1)?, 0.0),
        ("dice both empty", dice_score(&lv(&[]), &lv(&[]), 1)?, 1.0),
    ];
    for (name, got, want) in cases {
        out.push(CheckOutcome::new("metric", name, (got - want).abs(), 0.0));
    }
    let point = |at: [usize; 3]| {
        let d = [1, 4, 5];
        let mut m = vec![false; 20];
        m[(at[0] * d[1] + at[1]) * d[2] + at[2]] = true;
        Mask::new(d, m).expect("valid dims")
    };
    let h = hausdorff95(&point([0, 0, 0]), &point([0, 3, 4]))?;
    out.push(CheckOutcome::new(
        "metric",
        "hd95 3-4-5",
        h.map_or(f64::INFINITY, |v| (v - 5.0).abs()),
        0.0,
    ));
    let m = random_mask([4, 4, 4], 0.4, rng);
    let h = hausdorff95(&m, &m)?;
    out.push(CheckOutcome::new(
        "metric",
        "hd95 identical",
        h.map_or(f64::INFINITY, f64::abs),
        0.0,
    ));
    Ok(out)
}

/// FFT oracle, round trip and Parseval, conv oracle and metric oracle suites.
pub fn selftest() -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(7);
    let mut out = fft_oracle_suite(&mut rng)?;
    out.extend(round_trip_suite(&mut rng, 100)?);
    out.extend(conv_oracle_suite(&mut rng, 20)?);
    out.extend(metric_oracle_suite(&mut rng, 50)?);
    Ok(out)
}

/// Aligned one-line-per-check table.
pub fn render(outcomes: &[CheckOutcome]) -> String {
    let w = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    outcomes
        .iter()
        .map(|o| {
            format!(
                "{:<4}  {:<6}  {:<w$}  {:>10.3e}  (tol {:.0e})\n",
                if o.passed { "ok" } else { "FAIL" },
                o.suite,
                o.name,
                o.value,
                o.tolerance
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_covers_required_operations() {
        let names = gradient_audit_names().unwrap();
        for required in [
            "spectral_filter",
            "dwconv_cascade_k3",
            "intra_fe",
            "inter_fi_add",
            "inter_fi_max",
            "inter_fi_concat",
            "med_adapter_forward",
            "cross_entropy",
            "soft_dice",
            "segment_forward_1x1x4x8x8",
        ] {
            assert!(names.iter().any(|n| n == required), "{required}");
        }
    }

    #[test]
    fn outcome_rules() {
        assert!(CheckOutcome::new("s", "a", 0.0, 0.0).passed);
        assert!(!CheckOutcome::new("s", "a", 1e-12, 0.0).passed);
        assert!(!CheckOutcome::new("s", "a", f64::NAN, 1.0).passed);
        assert!(!CheckOutcome::new("s", "a", 1e-2, 1e-2).passed);
    }
}
