//! `slmlab` command line: sweeps, fits, profiling, search, training and
//! reports over the desk-scale workbench.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, MetricChoice};

/// Invalid configuration or arguments (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// An input artifact another command should have produced (exit code 3).
#[derive(Debug)]
pub struct Prerequisite {
    pub path: PathBuf,
    pub producer: String,
}

impl fmt::Display for Prerequisite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing {}; produce it with `slmlab {}`",
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for Prerequisite {}

#[derive(Parser, Debug)]
#[command(name = "slmlab", version, about = "Latency-aware hybrid SLM design workbench")]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the file's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each command writes into its own subdirectory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed (optionally with and without wnorm).
    Train,
    /// Train the depth x width grid for the scaling-law fit.
    Sweep,
    /// Fit the depth/width law to a sweep and pick the sweet spot.
    Fit,
    /// Build the operator latency table for this host.
    Profile {
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        /// Deterministic multiply-add model instead of timing.
        #[arg(long)]
        flop_model: bool,
    },
    /// Aging evolutionary search under a latency or parameter budget.
    Search {
        #[arg(long, value_enum)]
        metric: Option<MetricChoice>,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// Aggregate run files into tables.
    Report {
        /// Run files or directories; replaces the config's inputs.
        inputs: Vec<PathBuf>,
    },
    /// Vary how many attention layers stay full attention.
    AblateAttn,
    /// Train with and without meta tokens.
    MetaEval,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    // run seeds come from the global seed (or a recipe's seed list)
    for optim in [
        &mut cfg.train.optim,
        &mut cfg.sweep.optim,
        &mut cfg.search.optim,
        &mut cfg.ablate_attn.optim,
        &mut cfg.meta_eval.optim,
    ] {
        optim.seed = cfg.seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.out.take())
        .unwrap_or_else(|| PathBuf::from("runs"));
    match cli.command {
        Command::Train => commands::train(&cfg, &out),
        Command::Sweep => commands::sweep(&cfg, &out),
        Command::Fit => commands::fit(&cfg, &out),
        Command::Profile {
            widths,
            reps,
            flop_model,
        } => {
            if let Some(w) = widths {
                cfg.profile.widths = w;
            }
            if let Some(r) = reps {
                cfg.profile.reps = r;
            }
            cfg.profile.flop_model |= flop_model;
            commands::profile(&cfg, &out)
        }
        Command::Search { metric, budget, cycles } => {
            if let Some(m) = metric {
                cfg.search.metric = m;
            }
            if budget.is_some() {
                cfg.search.budget = budget;
            }
            if let Some(c) = cycles {
                cfg.search.cycles = c;
            }
            commands::search(&cfg, &out)
        }
        Command::Report { inputs } => {
            if !inputs.is_empty() {
                cfg.report.inputs = inputs;
            }
            commands::report(&cfg, &out)
        }
        Command::AblateAttn => commands::ablate_attn(&cfg, &out),
        Command::MetaEval => commands::meta_eval(&cfg, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Prerequisite>() {
            return 3;
        }
        if cause.is::<Invalid>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<slmlab::Error>() {
            return match e {
                slmlab::Error::Coverage(_) => 3,
                slmlab::Error::Config(_)
                | slmlab::Error::Genome(_)
                | slmlab::Error::GridCoverage(_)
                | slmlab::Error::Shape { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
