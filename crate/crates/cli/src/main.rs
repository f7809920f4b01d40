mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fail::{usage, CliResult};

#[derive(Parser)]
#[command(name = "csu", version, about = "Bayesian collaborative sparse unmixing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic scene with ground truth.
    Generate(GenerateArgs),
    /// Run the Gibbs sampler and write its point estimates.
    Unmix(UnmixArgs),
    /// Run a per-pixel baseline solver.
    Baseline(BaselineArgs),
    /// Score estimates against ground truth.
    Evaluate(EvaluateArgs),
    /// Render a field file as PGM images.
    Render(RenderArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "snr_db")]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Args)]
pub struct UnmixArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub nmc: Option<usize>,
    #[arg(long)]
    pub nbi: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed couplings: one value, or one per endmember separated by commas.
    #[arg(long, value_delimiter = ',', conflicts_with = "beta_auto")]
    pub beta: Option<Vec<f64>>,
    /// Tune the couplings during burn-in.
    #[arg(long)]
    pub beta_auto: bool,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub tmg_sweeps: Option<usize>,
    /// raster or chromatic.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Worker threads (falls back to CSU_THREADS).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(long)]
    pub progress: bool,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ncls, oracle-ncls or sunsal.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Support threshold (strict).
    #[arg(long)]
    pub rho: Option<f64>,
    /// True support file, required by oracle-ncls.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub truth_abundance: PathBuf,
    #[arg(long)]
    pub truth_support: Option<PathBuf>,
    /// Abundance estimate; repeat to compare several.
    #[arg(long, required = true)]
    pub estimate: Vec<PathBuf>,
    /// Support estimate for each `--estimate`, in the same order.
    #[arg(long)]
    pub support: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Upper end of the grey scale for count maps.
    #[arg(long)]
    pub endmembers: Option<usize>,
    /// File name prefix; defaults to the field file stem.
    #[arg(long)]
    pub stem: Option<String>,
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("CSU_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| usage(format!("CSU_THREADS must be an integer, got '{v}'")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Unmix(a) => {
            configure_threads(a.threads)?;
            commands::unmix(&a)
        }
        Command::Baseline(a) => {
            configure_threads(a.threads)?;
            commands::baseline(&a)
        }
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Render(a) => commands::render(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("csu: {e}");
            ExitCode::from(e.code)
        }
    }
}
