//! Command-line experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nnprat::config::ExperimentConfig;
use nnprat::experiment::{self, RunOptions};
use nnprat::Error;

#[derive(Parser)]
#[command(name = "nnprat", version, about = "Adversarial training with nearest-neighbor projection removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every grid point of a config.
    Run {
        config: PathBuf,
        /// Run a single seed instead of the configured seed axis.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory, replacing the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid points trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge summary.csv files into a per-method mean±std report.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Also write the report as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-evaluate a checkpoint with the config's test split and attacks.
    Eval { checkpoint: PathBuf, config: PathBuf },
}

fn report_error(e: &Error) {
    match e {
        Error::Config(v) => {
            eprintln!("invalid config:");
            for m in v {
                eprintln!("  - {m}");
            }
        }
        e => eprintln!("error: {e}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed_override,
            out,
            jobs,
        } => ExperimentConfig::from_file(&config).and_then(|cfg| {
            let opts = RunOptions {
                seed_override,
                output_dir: out,
                jobs,
                verbose: true,
            };
            let rows = experiment::run(&cfg, &opts)?;
            let failed = rows.iter().filter(|r| r.metrics.is_err()).count();
            let out = opts.output_dir.unwrap_or(cfg.output_dir);
            println!("{} runs ({failed} failed), summary at {}", rows.len(), out.join("summary.csv").display());
            Ok(())
        }),
        Command::Compare { summaries, csv } => experiment::compare(&summaries).and_then(|groups| {
            print!("{}", experiment::comparison_table(&groups));
            if let Some(path) = csv {
                std::fs::write(path, experiment::comparison_csv(&groups))?;
            }
            Ok(())
        }),
        Command::Eval { checkpoint, config } => ExperimentConfig::from_file(&config)
            .and_then(|cfg| experiment::eval_checkpoint(&checkpoint, &cfg))
            .map(|report| print!("{}", report.to_json())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
