//! `ccl` command line: continual contrastive learning runs, sweeps, probes,
//! exemplar inspection, and report aggregation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccl_cli::ablate::{cmd_ablate, Axis};
use ccl_cli::commands::{cmd_probe, cmd_report, cmd_run, cmd_sample};
use ccl_cli::exit_code_for;

#[derive(Parser)]
#[command(name = "ccl", about = "Continual contrastive learning engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep components, extra-queue size, or k-means cluster count.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sweep axis: components, esq_size, or kmeans_k.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values (ignored for components).
        #[arg(long, value_delimiter = ',')]
        values: Vec<u64>,
        /// Comma-separated seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Parallel worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-evaluate a checkpoint with per-task and pooled linear probes.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train per the config and dump the stored exemplars as CSV.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run directories into one comparison CSV.
    Report {
        /// Run directories containing report.json.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed).map(|report| {
            println!(
                "method {} seed {} final top-1 {:.4} (artifacts in {})",
                report.method.as_str(),
                report.seed,
                report.final_top1,
                out.display()
            );
        }),
        Command::Ablate { config, out, axis, values, seeds, jobs } => Axis::parse(&axis)
            .and_then(|axis| cmd_ablate(&config, &out, axis, &values, &seeds, jobs))
            .map(|()| println!("summary written to {}", out.join("summary.csv").display())),
        Command::Probe { checkpoint, config, out } => {
            cmd_probe(&checkpoint, &config, out.as_deref()).map(|csv| {
                if out.is_none() {
                    print!("{csv}");
                }
            })
        }
        Command::Sample { config, out } => {
            cmd_sample(&config, &out).map(|()| println!("exemplars written to {}", out.display()))
        }
        Command::Report { run_dirs, out } => {
            let dirs: Vec<&std::path::Path> = run_dirs.iter().map(PathBuf::as_path).collect();
            cmd_report(&dirs, &out).map(|()| println!("report written to {}", out.display()))
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
