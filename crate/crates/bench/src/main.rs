use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use truffle_bench::summary::render;
use truffle_bench::{run, summarize_dir, ExperimentConfig, SCALE_ENV};
use truffle_sim::Mode;

#[derive(Debug, Parser)]
#[command(name = "truffle-bench", version, about = "Run and summarize cold-start data-passing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment grid and write records and summaries.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the modes to run; defaults to the config's list.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Time-scale factor; overrides the config and TRUFFLE_SCALE.
        #[arg(long)]
        scale: Option<f64>,
        /// Output directory; overrides the config's output_path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run grid points concurrently. Timings are no longer reliable.
        #[arg(long)]
        parallel: bool,
    },
    /// Recompute summary.csv and summary.json from records.jsonl.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Truffle,
    Both,
}

const CONFIG_ERROR: u8 = 2;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run {
            config,
            mode,
            scale,
            out,
            parallel,
        } => run_command(config, mode, scale, out, parallel),
        Command::Summarize { input } => match summarize_dir(&input) {
            Ok(rows) => {
                print!("{}", render(&rows));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: cannot summarize {}: {e}", input.display());
                ExitCode::from(1)
            }
        },
    }
}

fn run_command(
    path: PathBuf,
    mode: Option<ModeArg>,
    scale: Option<f64>,
    out: Option<PathBuf>,
    parallel: bool,
) -> ExitCode {
    let mut config = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if let Ok(raw) = std::env::var(SCALE_ENV) {
        match raw.parse() {
            Ok(s) => config.scale_factor = s,
            Err(_) => {
                eprintln!("error: {SCALE_ENV}={raw:?} is not a number");
                return ExitCode::from(CONFIG_ERROR);
            }
        }
    }
    if let Some(s) = scale {
        config.scale_factor = s;
    }
    match mode {
        Some(ModeArg::Baseline) => config.modes = vec![Mode::Baseline],
        Some(ModeArg::Truffle) => config.modes = vec![Mode::Truffle],
        Some(ModeArg::Both) => config.modes = Mode::ALL.to_vec(),
        None => {}
    }
    if let Some(dir) = out {
        config.output_path = dir;
    }
    if parallel {
        eprintln!("warning: --parallel runs grid points concurrently; timings interfere and must not be used for timing assertions");
    }

    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(&config, parallel)) {
        Ok(outcome) => {
            print!("{}", render(&outcome.summary));
            println!("results in {}", outcome.out_dir.display());
            if outcome.complete() {
                ExitCode::SUCCESS
            } else {
                for p in &outcome.failed_points {
                    eprintln!(
                        "error: every repetition failed at size {} MB, delay {} ms, mode {}",
                        p.size_mb, p.added_delay_ms, p.mode
                    );
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
