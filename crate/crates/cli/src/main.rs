use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use glevy_cli::{emit_csv, load_config, run, RunOptions};

/// Runs the experiments of a configuration file and writes CSV reports.
#[derive(Debug, Parser)]
#[command(name = "glevy", version)]
struct Args {
    /// Experiment configuration (TOML).
    config: PathBuf,

    /// Output directory; overrides the `output` key of the config.
    #[arg(short, long)]
    output: Option<PathBuf>,

    /// Worker threads for parallel sections. Results do not depend on it.
    #[arg(short = 'j', long, default_value_t = 1)]
    workers: usize,

    /// More progress output on stderr (repeat for per-row detail).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Run only this experiment (plus whatever it references).
    #[arg(long)]
    only: Option<String>,

    /// Fill the `seconds` column of the summary (output is then no longer
    /// byte-reproducible).
    #[arg(long)]
    timings: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.max(1))
        .build_global()
    {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(2);
    }
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        filter: args.only,
        verbosity: args.verbose,
    };
    let report = match run(&cfg, &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let dir = args.output.unwrap_or(cfg.output);
    match emit_csv(&report, &dir, args.timings) {
        Ok(paths) => {
            if args.verbose > 0 {
                for p in paths {
                    eprintln!("wrote {}", p.display());
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let failures = report.failures();
    for row in &failures {
        eprintln!(
            "FAIL {} (value {}, tolerance {:?})",
            row.experiment_id, row.value, row.tolerance
        );
    }
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
