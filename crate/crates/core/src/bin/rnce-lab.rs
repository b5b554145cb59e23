use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rnce_lab::cli;
use rnce_lab::config::RunConfig;
use rnce_lab::evalstats::ProbeTask;
use rnce_lab::parallel::{configure_workers, ExecMode};
use rnce_lab::trainer::{Level, Method};
use rnce_lab::LabError;

const WORKERS_ENV: &str = "RNCE_LAB_WORKERS";

#[derive(Parser)]
#[command(name = "rnce-lab", version, about = "Synthetic-cohort R-NCE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort.
    Gen(Common),
    /// Train patch encoders or the aggregator for one method.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        level: Level,
    },
    /// Write representations for both splits.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
    },
    /// Bootstrap linear-probe metrics for one feature set.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Method whose embeddings are probed.
        #[arg(long, conflicts_with = "aux", required_unless_present = "aux")]
        method: Option<Method>,
        /// Probe the auxiliary features instead.
        #[arg(long)]
        aux: bool,
        /// Restrict to these tasks (repeatable).
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Brain-age gaps, correlations and outcome associations.
    Bag(Common),
    /// Compare all configured feature sets.
    Compare(Common),
    /// Summarize existing outputs.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen(c) | Command::Bag(c) | Command::Compare(c) | Command::Report(c) => c,
            Command::Train { common, .. } | Command::Embed { common, .. } | Command::Probe { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> rnce_lab::Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(data) = &c.data {
        cfg.data_dir = Some(data.clone());
    }
    cfg.resolve()
}

fn workers(cfg: &RunConfig) -> rnce_lab::Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| LabError::invalid(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(cfg.workers),
    }
}

fn run(command: Command, cfg: RunConfig) -> rnce_lab::Result<()> {
    if let Some(n) = workers(&cfg)? {
        configure_workers(n)?;
    }
    match command {
        Command::Gen(_) => {
            let dir = cli::cmd_gen(&cfg)?;
            println!("wrote cohort to {}", dir.display());
        }
        Command::Train { method, level, .. } => {
            let reports = cli::cmd_train(&cfg, method, level, ExecMode::Parallel)?;
            for r in &reports {
                println!(
                    "{method} {level} {}: loss {:.6} -> {:.6}",
                    r.region.as_deref().unwrap_or("image"),
                    r.initial_loss().unwrap_or(f64::NAN),
                    r.final_loss().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Embed { method, .. } => {
            cli::cmd_embed(&cfg, method)?;
            println!("wrote {method} embeddings");
        }
        Command::Probe { method, tasks, .. } => {
            let set = method.map_or("aux", Method::name);
            let parsed = tasks
                .iter()
                .map(|t| t.parse::<ProbeTask>())
                .collect::<Result<Vec<_>, _>>()?;
            let tasks = (!parsed.is_empty()).then_some(parsed.as_slice());
            let report = cli::cmd_probe(&cfg, set, tasks)?;
            for m in &report.results {
                println!("{set} {} {}: {:.4} ± {:.4}", m.task, m.metric, m.mean, m.std);
            }
        }
        Command::Bag(_) => {
            let out = cli::cmd_bag(&cfg)?;
            for m in &out.fit_metrics {
                println!("{}: MAE {:.3}, r {:?}", m.label, m.mae, m.pearson_r);
            }
        }
        Command::Compare(_) => {
            let report = cli::cmd_compare(&cfg)?;
            for c in &report.comparisons {
                println!("{} {} vs {}: {:.4} vs {:.4}, p = {}", c.task, c.a, c.b, c.mean_a, c.mean_b, c.p);
            }
        }
        Command::Report(_) => {
            let s = cli::cmd_report(&cfg)?;
            println!(
                "summary: {} training reports, compare {}, bag {}",
                s.training.len(),
                if s.compare.is_some() { "present" } else { "absent" },
                if s.bag.is_some() { "present" } else { "absent" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let common = args.command.common().clone();
    let cfg = match load_config(&common) {
        Ok(cfg) => cfg,
        Err(e @ LabError::Missing(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(args.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
