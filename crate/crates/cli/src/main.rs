use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowguide::config::{resolve_seed, run_hash, RunConfig};
use flowguide::io::{atomic_write, SampleTable};
use flowguide::metrics::{evaluate, EvalReport, ReportMeta};
use flowguide::oracles::Task;
use flowguide::pipeline::{balanced_labels, generate};
use flowguide::samplers::{Execution, SamplerConfig, SamplerKind};
use flowguide::selfcheck::{self, Faults};
use flowguide::trainer::{load_checkpoint, metrics_csv, save_checkpoint, Checkpoint, LogRow, Trainer};
use flowguide::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "flowguide", version, about = "Conditional flow matching with model-guided training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, metrics.csv and the resolved config.
    Train(TrainArgs),
    /// Draw samples from a checkpoint into a CSV file.
    Sample(SampleArgs),
    /// Score a samples CSV against the task's closed-form conditionals.
    Eval(EvalArgs),
    /// Repeat sample + eval over values of one sampler setting.
    Sweep(SweepArgs),
    /// Run the built-in correctness suites.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `guidance.w=1.45` or `sampler.steps=25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint. Only `total_steps`, `eval_every`,
    /// `eval_samples` and `checkpoint_every` may be overridden.
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SamplerArgs {
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg: Option<f64>,
    /// Sampler seed; `FLOWGUIDE_SEED` takes precedence.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples per condition.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Use the online weights instead of the EMA weights.
    #[arg(long)]
    online: bool,
    #[arg(long, default_value = "samples.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Task definition as JSON; the default task is used otherwise.
    #[arg(long, conflicts_with = "checkpoint")]
    task: Option<PathBuf>,
    /// Take the task from a checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for report.csv and report.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    #[value(name = "cfg_scale")]
    CfgScale,
    Steps,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::CfgScale => "cfg_scale",
            Axis::Steps => "steps",
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    values: Vec<f64>,
    /// Samples per condition at each point.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    online: bool,
    /// Output directory for sweep.csv and per-point reports.
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn exec() -> Execution {
    Execution::Parallel
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let (cfg, mut trainer) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let cfg = resumed_config(&ckpt, &a.overrides, a.out.as_deref())?;
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            trainer = trainer.with_schedule(&cfg.train)?;
            (cfg, trainer)
        }
        None => {
            let mut cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            cfg.train.seed = resolve_seed(cfg.train.seed, a.seed)?;
            if let Some(out) = &a.out {
                cfg.output_dir = out.clone();
            }
            let trainer = Trainer::new(cfg.train.clone(), cfg.task.clone())?;
            (cfg, trainer)
        }
    };
    trainer = trainer.with_eval_sampler(cfg.sampler.clone())?;
    let out = cfg.output_dir.clone();
    write_text(&out.join("resolved_config.json"), &cfg.to_json()?)?;
    let hash = cfg.hash()?;
    eprintln!(
        "training {} steps from step {} (seed {}, config {hash}) into {}",
        cfg.train.total_steps,
        trainer.step(),
        cfg.train.seed,
        out.display()
    );
    let mut rows: Vec<LogRow> = Vec::new();
    let result = trainer.run_into(cfg.train.total_steps, Some(&out), &mut rows);
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            let dump = out.join("diverged.ckpt");
            save_checkpoint(&trainer.checkpoint(), &dump)?;
            eprintln!("state at the failing step written to {}", dump.display());
        }
        return Err(e);
    }
    save_checkpoint(&trainer.checkpoint(), &out.join("latest.ckpt"))?;
    if let Some(last) = rows.last() {
        eprintln!(
            "done: step {} total {} amg {} align {}",
            last.step, last.losses.total, last.losses.amg, last.losses.align
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn resumed_config(ckpt: &Checkpoint, overrides: &[String], out: Option<&Path>) -> Result<RunConfig> {
    let base = RunConfig {
        train: ckpt.config.clone(),
        task: ckpt.task.clone(),
        output_dir: out.map_or_else(|| RunConfig::default().output_dir, Path::to_path_buf),
        ..RunConfig::default()
    };
    let cfg = RunConfig::from_json_str(&base.to_json()?, overrides)?;
    let mut fixed = cfg.train.clone();
    fixed.total_steps = ckpt.config.total_steps;
    fixed.eval_every = ckpt.config.eval_every;
    fixed.eval_samples = ckpt.config.eval_samples;
    fixed.checkpoint_every = ckpt.config.checkpoint_every;
    if fixed != ckpt.config || cfg.task != ckpt.task {
        return Err(Error::Config(
            "a resumed run may only change total_steps, eval_every, eval_samples and checkpoint_every".into(),
        ));
    }
    if cfg.train.total_steps < ckpt.state.step {
        return Err(Error::Config(format!(
            "total_steps {} is behind the checkpoint's step {}",
            cfg.train.total_steps, ckpt.state.step
        )));
    }
    Ok(cfg)
}

/// Sampler settings from the defaults, the flags and `FLOWGUIDE_SEED`; the
/// default seed is the training seed of the checkpoint.
fn sampler_config(a: &SamplerArgs, ckpt: &Checkpoint) -> Result<SamplerConfig> {
    let mut s = SamplerConfig {
        seed: resolve_seed(ckpt.config.seed, a.seed)?,
        ..SamplerConfig::default()
    };
    if let Some(k) = a.sampler {
        s.kind = k;
    }
    if let Some(st) = a.steps {
        s.steps = st;
    }
    if let Some(c) = a.cfg {
        s.cfg_scale = c;
    }
    s.validate()?;
    Ok(s)
}

fn draw(ckpt: &Checkpoint, n: usize, sampler: &SamplerConfig, online: bool) -> Result<(SampleTable, u64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()));
    }
    let encoder = ckpt.config.encoder(&ckpt.task)?;
    let params = if online { &ckpt.state.params } else { &ckpt.state.ema.shadow };
    let labels = balanced_labels(ckpt.task.k(), n);
    let gen = generate(params, &ckpt.config.model, &encoder, &labels, sampler, exec())?;
    let table = SampleTable {
        dim: ckpt.task.dim(),
        labels: gen.labels,
        coords: gen.output.samples,
        meta: ReportMeta {
            steps: Some(sampler.steps),
            cfg_scale: Some(sampler.cfg_scale),
            sampler: Some(sampler.kind.to_string()),
            seed: Some(sampler.seed),
            checkpoint: None,
            config_hash: Some(run_hash(&ckpt.config, &ckpt.task)?),
        },
    };
    Ok((table, gen.output.nfe))
}

fn cmd_sample(a: SampleArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let sampler = sampler_config(&a.sampler, &ckpt)?;
    let (table, nfe) = draw(&ckpt, a.n, &sampler, a.online)?;
    write_text(&a.out, &table.to_csv())?;
    eprintln!(
        "wrote {} samples to {} ({} {} steps, cfg {}, seed {}, {} network evaluations per trajectory)",
        table.labels.len(),
        a.out.display(),
        sampler.kind,
        sampler.steps,
        sampler.cfg_scale,
        sampler.seed,
        nfe
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let task = match (&a.task, &a.checkpoint) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let task: Task = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            task.validate()?;
            task
        }
        (None, Some(p)) => load_checkpoint(p)?.task,
        (None, None) => Task::default(),
    };
    let gaussian = task.gaussian()?;
    let text = std::fs::read_to_string(&a.samples).map_err(|e| Error::Io {
        path: a.samples.clone(),
        source: e,
    })?;
    let table = SampleTable::parse(&text, &a.samples)?;
    if table.dim != task.dim() {
        return Err(Error::Config(format!(
            "samples have {} coordinates but the task has dimension {}",
            table.dim,
            task.dim()
        )));
    }
    let mut meta = table.meta.clone();
    meta.checkpoint = a.checkpoint.as_ref().map(|p| p.display().to_string());
    let report = evaluate(&table.coords, &table.labels, gaussian, meta)?;
    write_report(&a.out, "report", &report)?;
    print!("{}", report.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    write_text(&dir.join(format!("{stem}.json")), &report.to_json()?)
}

pub const SWEEP_HEADER: &str =
    "axis,value,n,fd,kl,align_acc,mean_err,cov_err,mode_entropy,max_fd,nfe,sampler,steps,cfg_scale,seed,config_hash";

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let base = sampler_config(&a.sampler, &ckpt)?;
    let task = ckpt.task.gaussian()?.clone();
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for &value in &a.values {
        let mut s = base.clone();
        match a.axis {
            Axis::CfgScale => s.cfg_scale = value,
            Axis::Steps => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("step count {value} is not a positive integer")));
                }
                s.steps = value as usize;
            }
        }
        s.validate()?;
        let (table, nfe) = draw(&ckpt, a.n, &s, a.online)?;
        let mut meta = table.meta.clone();
        meta.checkpoint = Some(a.checkpoint.display().to_string());
        let report = evaluate(&table.coords, &table.labels, &task, meta)?;
        write_report(&a.out.join("points"), &format!("{}_{value}", a.axis.name()), &report)?;
        let g = &report.aggregate;
        let _ = writeln!(
            csv,
            "{},{value},{},{},{},{},{},{},{},{},{nfe},{},{},{},{},{}",
            a.axis.name(),
            g.n,
            g.fd,
            g.kl,
            g.align_acc,
            g.mean_err,
            g.cov_err,
            g.mode_entropy,
            report.max_fd(),
            s.kind,
            s.steps,
            s.cfg_scale,
            s.seed,
            table.meta.config_hash.as_deref().unwrap_or(""),
        );
        eprintln!("{} = {value}: fd {} align_acc {}", a.axis.name(), g.fd, g.align_acc);
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle_check(a: OracleArgs) -> Result<ExitCode> {
    let faults = Faults {
        flip_guidance_sign: a.inject_sign_flip,
    };
    let results = selfcheck::run_all(faults);
    for r in &results {
        println!(
            "{} {:<26} measured {:.3e} tolerance {:.0e}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.tolerance,
            r.detail
        );
    }
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&results)?)?;
    }
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
