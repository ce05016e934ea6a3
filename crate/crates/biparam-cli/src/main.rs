use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use biparam_cli::artifacts::OutDir;
use biparam_cli::commands;
use biparam_cli::config::Config;

/// Config-driven experiments on finite bi-parameter dyadic lattices.
#[derive(Parser)]
#[command(name = "biparam", version, about)]
struct Cli {
    /// configuration file (key = value with [sections])
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory for artifacts
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// worker threads (accepted for compatibility; runs are
    /// single-threaded for reproducibility)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Haar system identities at the configured lattice
    HaarCheck,
    /// goodness census, probabilities, and truncation counts
    GridCensus,
    /// Muckenhoupt constants and strong maximal consistency
    Ap,
    /// BMO flavors and the truncation defect curve
    Bmo,
    /// Carleson packing and embedding trials
    Carleson,
    /// kernel size/Hoelder conditions and cancellation envelopes
    KernelCheck,
    /// assemble the dyadic representation bundle
    Represent,
    /// assemble and verify against brute force
    Verify,
    /// truncation tail curves of the bundle pieces
    Decay,
    /// Riesz-Kolmogorov probe of an operator image family
    Probe,
    /// tensor non-compactness demonstration
    DemoRiesz,
    /// weight interpolation ladder
    InterpolateWeights,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = cli.threads;
    let cfg = match &cli.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
        },
        None => Config::default(),
    };
    let out = match OutDir::new(&cli.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("cannot create output directory: {e}");
            return ExitCode::from(1);
        }
    };
    let run = || -> commands::CmdResult {
        match cli.command {
            Command::HaarCheck => commands::haar_check(&cfg, &out, cli.seed),
            Command::GridCensus => commands::grid_census(&cfg, &out, cli.seed),
            Command::Ap => commands::ap(&cfg, &out, cli.seed),
            Command::Bmo => commands::bmo(&cfg, &out, cli.seed),
            Command::Carleson => commands::carleson(&cfg, &out, cli.seed),
            Command::KernelCheck => commands::kernel_check(&cfg, &out, cli.seed),
            Command::Represent => commands::represent(&cfg, &out, cli.seed),
            Command::Verify => commands::verify_cmd(&cfg, &out, cli.seed),
            Command::Decay => commands::decay(&cfg, &out, cli.seed),
            Command::Probe => commands::probe(&cfg, &out, cli.seed),
            Command::DemoRiesz => commands::demo_riesz(&cfg, &out, cli.seed),
            Command::InterpolateWeights => commands::interpolate_weights_cmd(&cfg, &out, cli.seed),
        }
    };
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
