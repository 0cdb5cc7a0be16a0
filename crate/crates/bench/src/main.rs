use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gda_bench::pipeline::{self, Method};
use gda_bench::{BenchError, RunConfig};

/// Diffusion-based test-time adaptation benchmark.
///
/// Exit codes: 0 success, 1 config error, 2 missing artifact,
/// 3 numerical failure.
#[derive(Parser)]
#[command(name = "gda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source splits, the shifted benchmark and audit sheets.
    GenData(Common),
    /// Train denoiser, classifier and encoder; write checkpoints.
    Train(Common),
    /// Adapt the benchmark with one method.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
    },
    /// Accuracy over executed reverse-step counts.
    SweepSteps(Common),
    /// Accuracy over augmentation counts.
    SweepAugs(Common),
    /// Entropy histograms of clean, shifted and adapted samples.
    EntropyReport(Common),
    /// Mean wall-seconds per sample for every method.
    Timing(Common),
    /// Unadapted accuracy per shift family and severity.
    SeverityReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
}

fn load(c: &Common) -> Result<RunConfig, BenchError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn print_csv<R: serde::Serialize>(rows: &[R]) -> Result<(), BenchError> {
    let bytes = gda_bench::report::to_csv(rows)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::GenData(c) => pipeline::gen_data(&load(&c)?),
        Command::Train(c) => print_csv(&[pipeline::train(&load(&c)?)?]),
        Command::Adapt { common, method } => {
            let method: Method = method.parse()?;
            let cfg = load(&common)?;
            print_csv(&pipeline::adapt(&cfg, method)?.rows)
        }
        Command::SweepSteps(c) => print_csv(&pipeline::sweep_steps(&load(&c)?)?),
        Command::SweepAugs(c) => {
            let (rows, zero_matches) = pipeline::sweep_augs(&load(&c)?)?;
            print_csv(&rows)?;
            eprintln!("k=0 matches gda_no_marginal: {zero_matches}");
            Ok(())
        }
        Command::EntropyReport(c) => print_csv(&pipeline::entropy_report(&load(&c)?)?),
        Command::Timing(c) => print_csv(&pipeline::timing(&load(&c)?)?.rows),
        Command::SeverityReport { common, samples } => {
            print_csv(&pipeline::severity_report(&load(&common)?, samples)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits with 2 on usage errors, which here means a missing artifact
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
