mod config;
mod jobs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use offnadir_core::datagen::DatasetConfig;
use offnadir_core::harness::{ExperimentPlan, ReportFormat};

#[derive(Parser, Debug)]
#[command(name = "offnadir", version, about = "Building segmentation on synthetic off-nadir imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file (`--plan` for bench and compare).
    #[arg(long, visible_alias = "plan")]
    config: Option<PathBuf>,
    /// Dotted override such as `train.lr=0.001`; repeatable, later ones win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed applied before the overrides.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the T, S and Ev datasets.
    Datagen(Common),
    /// Train a model from scratch on one role.
    Train(Common),
    /// Fine-tune a pretrained checkpoint on S.
    Adapt(Common),
    /// Distil a teacher checkpoint into a student on S.
    Distill(Common),
    /// Mutual learning of two students on S.
    Dml(Common),
    /// Score a checkpoint on a validation split.
    Eval(Common),
    /// Benchmark the roster of a plan.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Run the optimiser and loss search instead of the model benchmark.
        #[arg(long)]
        hparam: bool,
    },
    /// Run the knowledge transfer comparison of a plan.
    Compare(Common),
    /// Re-render stored reports.
    Report {
        /// Directory holding report.json and optionally stratified.json.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
        /// Output directory, defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Datagen(_) => "datagen",
            Command::Train(_) => "train",
            Command::Adapt(_) => "adapt",
            Command::Distill(_) => "distill",
            Command::Dml(_) => "dml",
            Command::Eval(_) => "eval",
            Command::Bench { .. } => "bench",
            Command::Compare(_) => "compare",
            Command::Report { .. } => "report",
        }
    }
}

/// Where `--seed` lands in each job config.
fn seed_paths(cmd: &Command) -> &'static [&'static str] {
    match cmd {
        Command::Datagen(_) => &["seed"],
        Command::Train(_) | Command::Distill(_) | Command::Dml(_) => &["model_seed", "train.seed"],
        Command::Adapt(_) => &["train.seed"],
        Command::Bench { .. } | Command::Compare(_) => &["seeds"],
        Command::Eval(_) | Command::Report { .. } => &[],
    }
}

fn overrides(cmd: &Command, c: &Common) -> Result<Vec<(Vec<String>, Value)>> {
    let mut out = Vec::new();
    if let Some(seed) = c.seed {
        for p in seed_paths(cmd) {
            let v = if *p == "seeds" { serde_json::json!([seed]) } else { serde_json::json!(seed) };
            out.push((p.split('.').map(str::to_string).collect(), v));
        }
    }
    for s in &c.set {
        out.push(config::parse_override(s)?);
    }
    Ok(out)
}

fn hash_of<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load<T: DeserializeOwned + Serialize>(cmd: &Command, c: &Common, marker: &str) -> Result<(T, String)> {
    let cfg: T = config::resolve(c.config.as_deref(), &overrides(cmd, c)?)?;
    jobs::guard_output(&c.out, marker, c.force)?;
    config::write_snapshot(&cfg, &c.out)?;
    let h = hash_of(&cfg)?;
    Ok((cfg, h))
}

fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Datagen(c) => {
            let cfg: DatasetConfig = config::resolve(c.config.as_deref(), &overrides(cmd, c)?)?;
            jobs::datagen(&cfg, &c.out, c.force)?;
            config::write_snapshot(&cfg, &c.out)
        }
        Command::Train(c) => {
            let (mut job, h): (jobs::TrainJob, _) = load(cmd, c, "model.safetensors")?;
            jobs::train_cmd(&mut job, &c.out, &h)?;
            config::write_snapshot(&job, &c.out)
        }
        Command::Adapt(c) => {
            let (job, h): (jobs::AdaptJob, _) = load(cmd, c, "model.safetensors")?;
            jobs::adapt_cmd(&job, &c.out, &h)
        }
        Command::Distill(c) => {
            let (mut job, h): (jobs::DistillJob, _) = load(cmd, c, "model.safetensors")?;
            jobs::distill_cmd(&mut job, &c.out, &h)?;
            config::write_snapshot(&job, &c.out)
        }
        Command::Dml(c) => {
            let (mut job, h): (jobs::DmlJob, _) = load(cmd, c, "student0.safetensors")?;
            jobs::dml_cmd(&mut job, &c.out, &h)?;
            config::write_snapshot(&job, &c.out)
        }
        Command::Eval(c) => {
            let (job, _): (jobs::EvalJob, _) = load(cmd, c, "eval.json")?;
            jobs::eval_cmd(&job, &c.out)
        }
        Command::Bench { common: c, hparam } => {
            let (plan, _): (ExperimentPlan, _) = load(cmd, c, "report.json")?;
            jobs::bench_cmd(&plan, *hparam, &c.out)
        }
        Command::Compare(c) => {
            let (plan, _): (ExperimentPlan, _) = load(cmd, c, "report.json")?;
            jobs::compare_cmd(&plan, &c.out)
        }
        Command::Report { input, format, out } => {
            let out: &Path = out.as_deref().unwrap_or(input);
            jobs::report_cmd(input, *format, out)
        }
    }
}

/// Variant name of the core error behind `err`, if any.
fn error_kind(err: &anyhow::Error) -> String {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<offnadir_core::Error>() {
            let dbg = format!("{e:?}");
            return dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string();
        }
    }
    if err.chain().any(|c| c.is::<serde_json::Error>()) {
        return "Config".into();
    }
    if err.chain().any(|c| c.is::<std::io::Error>()) {
        return "Io".into();
    }
    "Other".into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": {"kind": error_kind(&e), "message": format!("{e:#}")},
                "command": cli.command.name(),
            });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
