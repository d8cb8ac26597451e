use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use medtune::adapter::{Branches, InterMode};
use medtune::audit::{self, CheckOutcome};
use medtune::checkpoint::{Checkpoint, LoadPolicy};
use medtune::config::ExperimentConfig;
use medtune::model::{build_model, param_report, Task, TuningMode};
use medtune::pipeline::{self, MetricsLine};
use medtune::planner::{plan_params, Host};
use medtune::{train, Error, Result};

#[derive(Parser)]
#[command(
    name = "medtune",
    version,
    about = "Med-Adapter parameter-efficient fine-tuning on synthetic volumes"
)]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `finetune.train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct AdapterFlags {
    /// Bottleneck reduction ratio.
    #[arg(long)]
    alpha: Option<usize>,
    /// Comma list of conv3, conv5, fft, mix (or `all`).
    #[arg(long)]
    branches: Option<String>,
    /// Inter-stage fusion: none, add, max or concat.
    #[arg(long)]
    inter: Option<String>,
    /// Complex bias in the spectral filter: on or off.
    #[arg(long, value_name = "on|off")]
    fft_bias: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the backbone on synthetic shape images and save a checkpoint.
    Pretrain,
    /// Fine-tune on synthetic volumes, then evaluate on the held-out split.
    Finetune {
        /// scratch, full, head, vanilla-adapter or med-tuning.
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        adapter: AdapterFlags,
        /// Pre-trained checkpoint; defaults to `<out>/backbone.mtck`, which is
        /// produced by pre-training first when absent.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Score a fine-tuned checkpoint on the held-out split.
    Eval {
        /// Defaults to `<out>/model.mtck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic inserted-parameter ledger for a host backbone.
    ParamPlan {
        /// vit-b16, swin-t or custom.
        #[arg(long, default_value = "swin-t")]
        host: String,
        /// Stage widths for a custom host, comma separated.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        /// Stage depths for a custom host, comma separated.
        #[arg(long, value_delimiter = ',')]
        depths: Vec<usize>,
        #[command(flatten)]
        adapter: AdapterFlags,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Central-difference gradient audit of every differentiable operation.
    GradCheck {
        #[arg(long)]
        json: bool,
    },
    /// FFT, round-trip, convolution and metric oracle suites.
    Selftest {
        #[arg(long)]
        json: bool,
    },
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_)
        | Error::Data(_)
        | Error::Geometry(_)
        | Error::InvalidShape(_)
        | Error::ShapeMismatch { .. }
        | Error::Axis { .. } => (2, "config"),
        Error::Numerical(_) | Error::Training(_) | Error::Contract(_) | Error::Tape(_) => (3, "numerical"),
        Error::Io(_) | Error::Format(_) => (4, "io"),
    }
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &AdapterFlags) -> Result<()> {
    if let Some(a) = f.alpha {
        cfg.adapter.alpha = a;
    }
    if let Some(b) = &f.branches {
        cfg.adapter.branches = Branches::parse(b)?;
    }
    if let Some(i) = &f.inter {
        cfg.adapter.inter_mode = InterMode::parse(i)?;
    }
    if let Some(v) = &f.fft_bias {
        cfg.adapter.fft_bias = match v.as_str() {
            "on" => true,
            "off" => false,
            _ => return Err(Error::Config(format!("--fft-bias expects on or off, got {v:?}"))),
        };
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MEDTUNE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MEDTUNE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    started: Instant,
    log: Vec<String>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn note(&mut self, msg: String) {
        println!("{msg}");
        self.log
            .push(format!("{:>9.3}s {msg}", self.started.elapsed().as_secs_f64()));
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        medtune::codec::atomic_write(&self.path("resolved_config.json"), self.cfg.to_json().as_bytes())
    }

    /// Timestamps live only here so the other artifacts stay reproducible.
    fn finish(&self, command: &str) -> Result<()> {
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut text = format!(
            "{command} finished at unix {unix} after {:.3}s\n",
            self.started.elapsed().as_secs_f64()
        );
        for l in &self.log {
            text.push_str(l);
            text.push('\n');
        }
        medtune::codec::atomic_write(&self.path(&format!("{command}.log")), text.as_bytes())
    }
}

fn run_id(cfg: &ExperimentConfig, mode: &str) -> String {
    format!("{mode}-seed{}", cfg.seed)
}

fn pretrain(run: &mut Run) -> Result<PathBuf> {
    let mut lines = Vec::new();
    let outcome = pipeline::pretrain(&run.cfg, |e| {
        lines.push(format!("pretrain epoch {:>3}  loss {:.6}", e.epoch, e.loss))
    })?;
    for l in lines {
        run.note(l);
    }
    run.note(format!("pretrain accuracy {:.4}", outcome.accuracy));
    let path = run.path("backbone.mtck");
    Checkpoint::from_store(&outcome.model.store).save(&path)?;
    pipeline::write_jsonl(
        &run.path("pretrain_metrics.jsonl"),
        &pipeline::pretrain_lines(&run_id(&run.cfg, "pretrain"), &outcome),
    )?;
    run.note(format!("wrote {}", path.display()));
    Ok(path)
}

fn eval_line(mode: TuningMode, line: &MetricsLine) -> String {
    let dice: Vec<String> = line.dice.iter().flatten().map(|d| format!("{d:.4}")).collect();
    let hd: Vec<String> = line
        .hd95
        .iter()
        .flatten()
        .map(|h| h.map_or("undef".into(), |v| format!("{v:.3}")))
        .collect();
    format!(
        "eval {}  mean_dice {:.4}  dice [{}]  hd95 [{}]  tuned {} ({:.2}% of full {})  inserted {}",
        mode.as_str(),
        line.mean_dice.unwrap_or(f64::NAN),
        dice.join(", "),
        hd.join(", "),
        line.tuned,
        100.0 * line.tuned as f64 / line.full_tuned.max(1) as f64,
        line.full_tuned,
        line.inserted
    )
}

fn finetune(run: &mut Run, backbone: Option<PathBuf>) -> Result<()> {
    let mode = run.cfg.finetune.mode;
    let ckpt = if mode == TuningMode::Scratch {
        None
    } else {
        let path = match backbone {
            Some(p) => p,
            None if run.path("backbone.mtck").exists() => run.path("backbone.mtck"),
            None => {
                run.note("no backbone checkpoint found, pre-training first".into());
                pretrain(run)?
            }
        };
        Some(Checkpoint::load(&path)?)
    };
    let mut lines = Vec::new();
    let outcome = pipeline::finetune(&run.cfg, ckpt.as_ref(), |e| {
        lines.push(format!(
            "finetune {} epoch {:>3}  loss {:.6}",
            mode.as_str(),
            e.epoch,
            e.loss
        ))
    })?;
    for l in lines {
        run.note(l);
    }
    let records = pipeline::metrics_lines(
        &run_id(&run.cfg, mode.as_str()),
        mode,
        &outcome.epochs,
        Some(&outcome.metrics),
        &outcome.report,
        pipeline::full_tuned(&run.cfg)?,
    );
    Checkpoint::from_store(&outcome.model.store).save(&run.path("model.mtck"))?;
    pipeline::write_jsonl(&run.path("metrics.jsonl"), &records)?;
    let report = serde_json::to_string_pretty(&outcome.report).map_err(|e| Error::Format(e.to_string()))?;
    medtune::codec::atomic_write(&run.path("params.json"), report.as_bytes())?;
    let line = eval_line(mode, records.last().expect("eval line present"));
    run.note(line);
    Ok(())
}

fn eval(run: &mut Run, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = &run.cfg;
    let mode = cfg.finetune.mode;
    let path = checkpoint.unwrap_or_else(|| run.path("model.mtck"));
    let ckpt = Checkpoint::load(&path)?;
    let mut model = build_model(
        &cfg.backbone,
        &cfg.adapter,
        mode,
        Task::Segment {
            classes: cfg.finetune.classes,
        },
        &medtune::Rng::new(cfg.seed).derive("model"),
    )?;
    ckpt.apply(&mut model.store, LoadPolicy::Exact)?;
    let (_, eval_set) = pipeline::finetune_data(cfg)?;
    let metrics = train::evaluate(&model, &eval_set)?;
    let records = pipeline::metrics_lines(
        &run_id(cfg, mode.as_str()),
        mode,
        &[],
        Some(&metrics),
        &param_report(&model),
        pipeline::full_tuned(cfg)?,
    );
    pipeline::write_jsonl(&run.path("eval_metrics.jsonl"), &records)?;
    let line = eval_line(mode, &records[0]);
    run.note(line);
    Ok(())
}

fn report_checks(outcomes: &[CheckOutcome], json: bool, what: &str) -> Result<()> {
    if json {
        for o in outcomes {
            println!(
                "{}",
                serde_json::to_string(o).map_err(|e| Error::Format(e.to_string()))?
            );
        }
    } else {
        print!("{}", audit::render(outcomes));
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what}: {} of {} checks failed: {}",
            failed.len(),
            outcomes.len(),
            failed.join(", ")
        )))
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => match (&cli.command, &cli.out) {
            (Command::Eval { .. }, Some(out)) if out.join("resolved_config.json").exists() => {
                ExperimentConfig::from_file(&out.join("resolved_config.json"))?
            }
            _ => ExperimentConfig::default(),
        },
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Finetune { mode, adapter, .. } => {
            if let Some(m) = mode {
                cfg.finetune.mode = TuningMode::parse(m)?;
            }
            apply_flags(&mut cfg, adapter)?;
        }
        Command::ParamPlan { adapter, .. } => apply_flags(&mut cfg, adapter)?,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = resolve(&cli)?;
    let explicit_out = cli.out.is_some();
    let mut run = Run {
        cfg,
        out: cli.out.unwrap_or_else(|| PathBuf::from("medtune-out")),
        started: Instant::now(),
        log: Vec::new(),
    };
    let name = match &cli.command {
        Command::Pretrain => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Eval { .. } => "eval",
        Command::ParamPlan { .. } => "param-plan",
        Command::GradCheck { .. } => "grad-check",
        Command::Selftest { .. } => "selftest",
    };
    let writes_files = matches!(
        cli.command,
        Command::Pretrain | Command::Finetune { .. } | Command::Eval { .. }
    );
    if writes_files || explicit_out {
        run.prepare()?;
    }
    match cli.command {
        Command::Pretrain => {
            pretrain(&mut run)?;
        }
        Command::Finetune { backbone, .. } => finetune(&mut run, backbone)?,
        Command::Eval { checkpoint } => eval(&mut run, checkpoint)?,
        Command::ParamPlan {
            host,
            dims,
            depths,
            json,
            ..
        } => {
            let host = if host == "custom" {
                Host::Custom { dims, depths }
            } else {
                Host::parse(&host)?
            };
            let plan = plan_params(&host, &run.cfg.adapter)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string(&plan).map_err(|e| Error::Format(e.to_string()))?
                );
            } else {
                print!("{}", plan.render());
            }
        }
        Command::GradCheck { json } => report_checks(&audit::gradient_audit()?, json, "gradient audit")?,
        Command::Selftest { json } => report_checks(&audit::selftest()?, json, "selftest")?,
    }
    if writes_files {
        run.finish(name)?;
    }
    Ok(())
}

fn reason(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let line = serde_json::json!({ "status": "error", "code": code, "kind": kind, "reason": reason(&e) });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapter_flags_map_onto_config() {
        let mut cfg = ExperimentConfig::default();
        let flags = AdapterFlags {
            alpha: Some(4),
            branches: Some("conv3,fft".into()),
            inter: Some("max".into()),
            fft_bias: Some("on".into()),
        };
        apply_flags(&mut cfg, &flags).unwrap();
        assert_eq!(cfg.adapter.alpha, 4);
        assert!(cfg.adapter.branches.conv3 && cfg.adapter.branches.fft && !cfg.adapter.branches.conv5);
        assert_eq!(cfg.adapter.inter_mode, InterMode::Max);
        assert!(cfg.adapter.fft_bias);
        let bad = AdapterFlags {
            fft_bias: Some("yes".into()),
            ..AdapterFlags::default()
        };
        assert!(matches!(apply_flags(&mut cfg, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())).0, 2);
        assert_eq!(exit_code(&Error::Training("x".into())).0, 3);
        assert_eq!(exit_code(&Error::Numerical("x".into())).0, 3);
        assert_eq!(exit_code(&Error::Format("x".into())).0, 4);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))).0, 4);
    }

    #[test]
    fn cli_parses_global_options_after_subcommand() {
        let cli = Cli::try_parse_from([
            "medtune", "finetune", "--mode", "head", "--seed", "9", "--set", "seed=1",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(9));
        assert_eq!(resolve(&cli).unwrap().seed, 9);
        assert_eq!(resolve(&cli).unwrap().finetune.mode, TuningMode::Head);
    }
}
