//! Thin command-line front end over [`mtdlab::pipeline`]. All logic lives in
//! the library; this binary only parses flags, applies them as config
//! overrides, dispatches one command, and prints the outcome.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mtdlab::analysis::EntropyMode;
use mtdlab::pipeline::{
    cmd_analyze, cmd_eval, cmd_gen_assets, cmd_steer, cmd_sweep, cmd_train, resolve_out_root,
    run_dir, CmdOutcome, RunConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mtdlab",
    version,
    about = "Multiple-token divergence experiments: generate assets, train micro \
             transformers, measure divergence, steer decoding, and analyze runs."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Freeze the task assets (memorized sequences, automata, creative worlds)
    GenAssets(CommonArgs),
    /// Train one model per replication seed on the configured stream
    Train(CommonArgs),
    /// Record divergence traces and per-sequence records on the five tasks
    Eval(CommonArgs),
    /// Generate creative items at one (temperature, alpha) steering setting
    Steer(CommonArgs),
    /// Run the full (temperature, alpha) creativity grid per seed
    Sweep(CommonArgs),
    /// Aggregate eval records into the experiment tables and plot data
    Analyze(CommonArgs),
}

impl Command {
    fn split(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::GenAssets(a) => ("gen-assets", a),
            Command::Train(a) => ("train", a),
            Command::Eval(a) => ("eval", a),
            Command::Steer(a) => ("steer", a),
            Command::Sweep(a) => ("sweep", a),
            Command::Analyze(a) => ("analyze", a),
        }
    }
}

/// Flags shared by every verb. Grid and mode flags override the `[steer]`
/// config section; verbs that do not read that section ignore them.
#[derive(Args)]
struct CommonArgs {
    /// Run configuration TOML (library defaults when omitted)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed override (assets, worlds, item/analysis randomness)
    #[arg(long)]
    seed: Option<u64>,
    /// Replication seeds override, comma-separated (one model each)
    #[arg(long, value_delimiter = ',', value_name = "S1,S2,…")]
    seeds: Option<Vec<u64>>,
    /// Output root (beats config `out_dir` and $MTDLAB_OUT)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Rewrite artifacts even when they are fresh or stale
    #[arg(long)]
    force: bool,
    /// Steering alpha grid override, comma-separated
    #[arg(long, value_delimiter = ',', value_name = "A1,A2,…", allow_hyphen_values = true)]
    alpha_grid: Option<Vec<f64>>,
    /// Steering temperature grid override, comma-separated
    #[arg(long, value_delimiter = ',', value_name = "T1,T2,…")]
    temp_grid: Option<Vec<f64>>,
    /// Entropy handling during steering: geodesic | fixed
    #[arg(long, value_name = "MODE")]
    entropy_mode: Option<String>,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (verb, args) = cli.command.split();

    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(grid) = &args.alpha_grid {
        cfg.steer.alphas = grid.clone();
    }
    if let Some(grid) = &args.temp_grid {
        cfg.steer.temps = grid.clone();
    }
    if let Some(mode) = &args.entropy_mode {
        cfg.steer.entropy_mode = EntropyMode::parse(mode)
            .ok_or_else(|| anyhow!("--entropy-mode must be `geodesic` or `fixed`, got {mode:?}"))?;
    }
    cfg.validate()?;

    let out_root = resolve_out_root(args.out.as_deref(), &cfg);
    let dir = run_dir(&out_root, &cfg);
    let outcome: CmdOutcome = match verb {
        "gen-assets" => cmd_gen_assets(&cfg, &dir, args.force)?,
        "train" => cmd_train(&cfg, &dir, args.force)?,
        "eval" => cmd_eval(&cfg, &dir, args.force)?,
        "steer" => cmd_steer(&cfg, &dir, args.force)?,
        "sweep" => cmd_sweep(&cfg, &dir, args.force)?,
        "analyze" => cmd_analyze(&cfg, &dir, args.force)?,
        _ => unreachable!("clap restricts the verb set"),
    };
    println!("{verb}: {outcome} in {}", dir.display());
    Ok(())
}
