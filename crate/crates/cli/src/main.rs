mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use anchorlab::config::ExperimentConfig;
use anchorlab::io::{fmt_f64, write_run_outputs};
use anchorlab::learned::{load_checkpoint, save_checkpoint, Denoiser};
use anchorlab::optimizer::{run, PriorKind, RunContext};
use anchorlab::sweep::run_sweep;
use anchorlab::validate::{run_validation, ValidationOptions};
use anchorlab::Variant;

#[derive(Parser)]
#[command(name = "anchorlab", version, about = "Score-distillation experiments on analytic and learned toy priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "ANCHORLAB_OUT", default_value = "anchorlab-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write trajectory.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Override `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Learned-prior checkpoint; overrides `prior.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every (seed, variant) pair with shared noise per seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated seeds or a half-open range such as `0..50`.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Comma-separated variants; defaults to the one in the config.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the oracle and identity checks and write validation.json.
    Validate {
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Scales eta inside the reconstruction-gap identity (mutation fixture).
        #[arg(long, default_value_t = 1.0, hide = true)]
        corrupt_eta: f64,
    },
    /// Pretrain the learned prior; writes a checkpoint and loss.csv.
    TrainPrior {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Where to write the checkpoint; defaults to `prior.checkpoint`,
        /// else `<out>/prior.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render SVG charts for every trajectory.csv and loss.csv under `--out`.
    Report {
        #[command(flatten)]
        out: OutArg,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

/// Failure class, mapped onto the process exit code.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Validation(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Validation(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) | Failure::Validation(e) => e,
        }
    }
}

/// Library config errors are config failures; everything else is runtime.
impl From<anchorlab::Error> for Failure {
    fn from(e: anchorlab::Error) -> Self {
        match e {
            anchorlab::Error::Config { .. } => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run { config, out, seed, checkpoint } => cmd_run(&config, &out.out, seed, checkpoint),
        Command::Sweep { config, out, seeds, variants, jobs, checkpoint } => {
            cmd_sweep(&config, &out.out, &seeds, &variants, jobs, checkpoint)
        }
        Command::Validate { out, seed, instances, corrupt_eta } => {
            cmd_validate(&out.out, ValidationOptions { seed, instances, eta_scale: corrupt_eta })
        }
        Command::TrainPrior { config, out, checkpoint } => cmd_train_prior(&config, &out.out, checkpoint),
        Command::Report { out } => report::render_all(&out.out).map_err(Failure::Runtime),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure::Config(anyhow!(e).context(format!("in {}", path.display()))))
}

/// The pretrained model for learned-prior configs, `None` otherwise.
fn load_model(cfg: &ExperimentConfig, config_path: &Path, flag: Option<PathBuf>) -> Result<Option<Denoiser>, Failure> {
    if cfg.prior.kind != PriorKind::Learned {
        return Ok(None);
    }
    let path = flag
        .or_else(|| cfg.checkpoint_path(config_path))
        .ok_or_else(|| Failure::Config(anyhow!("prior.kind is `learned` but no checkpoint was given")))?;
    let model = load_checkpoint(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::Config)?;
    if model.arch() != &cfg.arch() {
        return Err(Failure::Config(anyhow!(
            "checkpoint {} was trained for a different prior (dimension, labels or timesteps differ)",
            path.display()
        )));
    }
    Ok(Some(model))
}

fn cmd_run(config_path: &Path, out: &Path, seed: Option<u64>, checkpoint: Option<PathBuf>) -> CmdResult {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    let model = load_model(&cfg, config_path, checkpoint)?;
    let (prior, sched, views) = (cfg.prior()?, cfg.schedule()?, cfg.views()?);
    let ctx = RunContext { prior: &prior, sched: &sched, views: &views, learned: model.as_ref() };
    let outcome = run(&cfg.run_config(), &ctx).map_err(|e| match e {
        anchorlab::Error::InvalidArgument(_) | anchorlab::Error::UnknownLabel(_) | anchorlab::Error::DimensionMismatch { .. } => {
            Failure::Config(anyhow!(e))
        }
        other => Failure::from(other),
    })?;
    let summary = write_run_outputs(out, &cfg, &outcome).with_context(|| format!("writing {}", out.display()))?;
    if let Some(model) = &outcome.model {
        save_checkpoint(model, &out.join("finetuned.ckpt"))?;
    }
    if let Some(f) = &outcome.failure {
        return Err(Failure::Runtime(anyhow!(
            "run aborted after {} of {} steps: {f}; partial outputs kept in {}",
            summary.steps_completed,
            summary.steps_requested,
            out.display()
        )));
    }
    if let Some(r) = &summary.report {
        println!("{}: nearest_mode_distance {}", out.display(), fmt_f64(r.nearest_mode_distance));
    }
    Ok(())
}

fn parse_seeds(spec: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range `{spec}`");
        }
        return Ok((a..b).collect());
    }
    let seeds = spec.split(',').map(|s| s.trim().parse::<u64>()).collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn cmd_sweep(
    config_path: &Path,
    out: &Path,
    seeds: &str,
    variants: &[String],
    jobs: usize,
    checkpoint: Option<PathBuf>,
) -> CmdResult {
    let cfg = load_config(config_path)?;
    let seeds = parse_seeds(seeds).with_context(|| "parsing --seeds").map_err(Failure::Config)?;
    let variants: Vec<Variant> = if variants.is_empty() {
        vec![cfg.guidance.variant]
    } else {
        variants
            .iter()
            .map(|v| v.parse::<Variant>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Config(anyhow!(e).context("parsing --variants")))?
    };
    if variants.contains(&Variant::NegSource) && cfg.guidance.neg_text.is_none() {
        return Err(Failure::Config(anyhow!("variant neg-source needs guidance.neg_text in the config")));
    }
    let model = load_model(&cfg, config_path, checkpoint)?;
    let result = run_sweep(&cfg, model.as_ref(), &seeds, &variants, jobs, Some(out))?;
    for a in &result.aggregates {
        println!(
            "{:<18} mean_nearest_mode_distance {:.4}  win_rate {:.3}  failures {}",
            a.variant.name(),
            a.mean_nearest_mode_distance,
            a.win_rate,
            a.failures
        );
    }
    let unpaired: Vec<u64> = seeds.iter().copied().filter(|&s| !result.paired(s)).collect();
    if !unpaired.is_empty() {
        return Err(Failure::Runtime(anyhow!("noise streams differ across variants for seeds {unpaired:?}")));
    }
    if result.failures() > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{} of {} runs failed; see {}",
            result.failures(),
            result.runs.len(),
            out.join("runs.csv").display()
        )));
    }
    Ok(())
}

fn cmd_validate(out: &Path, opts: ValidationOptions) -> CmdResult {
    let report = run_validation(&opts);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    fs::write(out.join("validation.json"), format!("{json}\n")).context("writing validation.json")?;
    println!("{json}");
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(anyhow!("{} of {} checks failed: {}", failed.len(), report.checks.len(), failed.join(", "))))
    }
}

fn cmd_train_prior(config_path: &Path, out: &Path, checkpoint: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config_path)?;
    let (prior, sched) = (cfg.prior()?, cfg.schedule()?);
    let mut model = Denoiser::new(cfg.arch(), cfg.training.init_seed);
    let report = model.pretrain(&prior, &sched, &cfg.training.options, cfg.training.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = checkpoint.or_else(|| cfg.checkpoint_path(config_path)).unwrap_or_else(|| out.join("prior.ckpt"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&model, &path)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv += &format!("{},{}\n", i + 1, fmt_f64(*l));
    }
    fs::write(out.join("loss.csv"), csv).context("writing loss.csv")?;
    let summary = serde_json::json!({
        "checkpoint": path,
        "steps": report.losses.len(),
        "validation_initial": report.validation_initial,
        "validation_final": report.validation_final,
        "reduction": report.validation_initial / report.validation_final,
    });
    fs::write(out.join("training.json"), serde_json::to_string_pretty(&summary).context("serializing")? + "\n")
        .context("writing training.json")?;
    println!(
        "validation loss {} -> {} ({:.1}x); checkpoint {}",
        fmt_f64(report.validation_initial),
        fmt_f64(report.validation_final),
        report.validation_initial / report.validation_final,
        path.display()
    );
    Ok(())
}
