//! Command-line front door: argument parsing, exit codes, thread caps.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::pipeline::{fusion_sweep, Pipeline, RunConfig, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FATLAB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "fatlab", version, about = "Front-end adaptive self-supervised training, desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Build the synthetic corpora and the noisy mixtures.
    Simulate(Opts),
    /// Train every configured enhancement front-end.
    TrainFrontends(Opts),
    /// Fit the k-means codebook and write frame targets.
    MakeTargets(Opts),
    /// Pretrain the baseline and every configured system.
    Pretrain(Opts),
    /// CTC fine-tuning of each pretrained system.
    Finetune(Opts),
    /// Decode every test band with every front-end.
    Evaluate(Opts),
    /// Collect the evaluation CSVs into tables.
    Report(Opts),
    /// Run every stage in order.
    All(Opts),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    /// Baseline, IMST only, and all nine fusion variants and placements.
    Fusion,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Eq)]
pub struct Opts {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Rerun units whose records are current.
    #[arg(long)]
    pub force: bool,
    /// Print the plan and exit without side effects.
    #[arg(long)]
    pub dry_run: bool,
    /// Replace `run.systems` with a predefined set.
    #[arg(long, value_enum)]
    pub sweep: Option<Sweep>,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
}

impl Command {
    pub fn opts(&self) -> &Opts {
        match self {
            Command::Simulate(o)
            | Command::TrainFrontends(o)
            | Command::MakeTargets(o)
            | Command::Pretrain(o)
            | Command::Finetune(o)
            | Command::Evaluate(o)
            | Command::Report(o)
            | Command::All(o) => o,
        }
    }

    /// Stages the command covers, in order.
    pub fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Simulate(_) => vec![Stage::Simulate],
            Command::TrainFrontends(_) => vec![Stage::TrainFrontends],
            Command::MakeTargets(_) => vec![Stage::MakeTargets],
            Command::Pretrain(_) => vec![Stage::Pretrain],
            Command::Finetune(_) => vec![Stage::Finetune],
            Command::Evaluate(_) => vec![Stage::Evaluate],
            Command::Report(_) => vec![Stage::Report],
            Command::All(_) => Stage::ALL.to_vec(),
        }
    }
}

/// Caps the global rayon pool from `FATLAB_THREADS`. An unparsable or zero
/// value is a config error.
pub fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}=`{v}` is not a positive integer")))?;
    // a second call in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn load_config(opts: &Opts) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&opts.config).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    if opts.sweep == Some(Sweep::Fusion) {
        cfg.run.systems = fusion_sweep();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

/// Executes a parsed command and returns the process exit code. Output
/// meant for the user goes to stdout; diagnostics go to stderr.
pub fn run(cli: &Cli) -> i32 {
    let opts = cli.command.opts();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    let cfg = match load_config(opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if opts.dump_config {
        return match cfg.to_toml() {
            Ok(t) => {
                print!("{t}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        };
    }
    let pipeline = Pipeline::new(cfg).force(opts.force);
    let stages = cli.command.stages();
    if opts.dry_run {
        return match pipeline.plan(&stages) {
            Ok(plan) => {
                for (stage, lines) in plan {
                    println!("[{stage}]");
                    for l in lines {
                        println!("  {l}");
                    }
                }
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        };
    }
    for stage in stages {
        match pipeline.run_stage(stage) {
            Ok(s) => println!("{stage}: ran {}, up to date {}", s.ran.len(), s.skipped.len()),
            Err(e) => {
                eprintln!("error in {stage}: {e}");
                return exit_code(&e);
            }
        }
    }
    EXIT_OK
}
