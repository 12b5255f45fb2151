use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use nishimori_lab::experiment::{self, ExperimentConfig, Outcome};

#[derive(Parser)]
#[command(
    name = "nishimori-lab",
    version,
    about = "Numerical checks of Nishimori identities and overlap concentration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured test and write results.csv, report.json and manifest.json.
    Run(Common),
    /// Tabulate λ-averaged variances across the configured N values, with trend verdicts.
    Sweep(Common),
    /// Parse and validate a config without computing anything.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load(args: &Common) -> Result<ExperimentConfig, ExitCode> {
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return Err(ExitCode::from(EXIT_CONFIG));
        }
    };
    match ExperimentConfig::parse(&text) {
        Ok(mut cfg) => {
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            Ok(cfg)
        }
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            Err(ExitCode::from(EXIT_CONFIG))
        }
    }
}

fn execute(cmd: &str, args: &Common, cfg: &ExperimentConfig) -> anyhow::Result<Outcome> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().context("building the worker pool")?;
    let outcome = pool.install(|| if cmd == "sweep" { experiment::sweep(cfg) } else { experiment::run(cfg) })?;
    let dir = args
        .output
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    experiment::write_outputs(&dir, cmd, &cfg.hash(), cfg.seed, &outcome.rows, &outcome.timings)
        .with_context(|| format!("writing outputs to {}", dir.display()))?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Run(a) => ("run", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Validate(a) => ("validate", a),
    };
    let cfg = match load(args) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if name == "validate" {
        println!("ok {}", cfg.hash());
        return ExitCode::SUCCESS;
    }
    match execute(name, args, &cfg) {
        Ok(outcome) if outcome.passed() => {
            println!("pass: {} rows", outcome.rows.len());
            ExitCode::SUCCESS
        }
        Ok(outcome) => {
            for r in outcome.failures() {
                eprintln!("FAIL {}", serde_json::to_string(r).unwrap_or_default());
            }
            ExitCode::from(EXIT_FAIL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
