use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nfts_core::harness::{ExperimentConfig, Method, Pipeline, OUT_DIR_ENV};

/// Neural fine-tuning search on synthetic few-shot benchmarks.
///
/// Stages run in order and hand over through files in the output
/// directory: pretrain, train-supernet, search, shortlist, then eval or
/// ablate, analyze and export.
#[derive(Parser, Debug)]
#[command(name = "nfts", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Default bundle: `desk` (fast) or `full`.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Override one config key, e.g. `--set population=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; beats the config file and the NFTS_OUT_DIR variable.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Episodic pre-training of the backbone on the seen domains.
    Pretrain,
    /// Single-path training of the supernet built on the backbone.
    TrainSupernet,
    /// Evolutionary search over paths.
    Search,
    /// Pick the diverse top-N paths from the search history.
    Shortlist,
    /// Evaluate one method on the test split of every test domain.
    Eval {
        /// frozen, adapter, finetune, both, nfts1 or nftsN.
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Episodes per test domain; defaults to `test_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Four corners, NFTS-1 and NFTS-N on identical episodes.
    Ablate,
    /// Point-biserial correlation of each path bit with fitness.
    Analyze,
    /// Search population snapshots as CSV.
    Export,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}` (frozen, adapter, finetune, both, nfts1, nftsN)"))
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    if let Some(p) = &cli.profile {
        text.push_str(&format!("\nprofile = {p}\n"));
    }
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.out_dir = PathBuf::from(dir);
    }
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        return Ok(cfg.to_text().trim_end().to_string());
    }
    let p = Pipeline::new(cfg)?;
    let summary = match cli.command {
        Command::Pretrain => p.pretrain()?,
        Command::TrainSupernet => p.train_supernet()?,
        Command::Search => p.search()?,
        Command::Shortlist => p.shortlist()?,
        Command::Eval { method, episodes } => p.eval(method, episodes)?,
        Command::Ablate => p.ablate()?,
        Command::Analyze => p.analyze()?,
        Command::Export => p.export()?,
    };
    Ok(summary)
}

/// Runs the CLI on `args` (program name first) and returns the exit code:
/// 0 on success, 1 on a failed stage, 2 on a usage error.
fn cli_main<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(cli_main(std::env::args_os()))
}
