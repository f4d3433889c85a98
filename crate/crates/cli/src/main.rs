use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod checks;
mod commands;

/// Learnable permutohedral-lattice filtering.
///
/// Exit codes: 0 success, 2 usage error, 3 data error.
#[derive(Debug, Parser)]
#[command(name = "permutofilt", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0, env = "PERMUTOFILT_SEED")]
    pub seed: u64,
    /// Output path (image, weights or CSV depending on the command).
    #[arg(long, global = true, env = "PERMUTOFILT_OUT")]
    pub out: Option<PathBuf>,
    /// key=value configuration file.
    #[arg(long, global = true, env = "PERMUTOFILT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel filtering (default: all cores).
    #[arg(long, global = true, env = "PERMUTOFILT_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bilateral-filter an image with a Gaussian or a stored filter.
    Filter(commands::FilterArgs),
    /// Joint bilateral upsampling of a low-resolution image.
    Upsample(commands::UpsampleArgs),
    /// Learn a denoising filter and write it as PBF1.
    DenoiseTrain(commands::DenoiseTrainArgs),
    /// Denoise an image with a stored filter.
    DenoiseApply(commands::DenoiseApplyArgs),
    /// Filter per-point displacements over embedding features (CSV).
    MeshDenoise(commands::MeshArgs),
    /// DenseCRF mean-field refinement of per-pixel unaries.
    Crf(commands::CrfArgs),
    /// Multi-scale explicit bilateral filtering, optionally on superpixels.
    BiFilter(commands::BiFilterArgs),
    /// Finite-difference check of an analytic gradient.
    Gradcheck(checks::GradcheckArgs),
    /// Per-stage wall time of the lattice filter.
    Bench(checks::BenchArgs),
    /// Compare the sparse filter against explicit dense matrices.
    OracleDiff(checks::OracleArgs),
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl From<permutofilt::Error> for Failure {
    fn from(e: permutofilt::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Filter(a) => commands::filter(g, a),
        Command::Upsample(a) => commands::upsample(g, a),
        Command::DenoiseTrain(a) => commands::denoise_train(g, a),
        Command::DenoiseApply(a) => commands::denoise_apply(g, a),
        Command::MeshDenoise(a) => commands::mesh_denoise(g, a),
        Command::Crf(a) => commands::crf(g, a),
        Command::BiFilter(a) => commands::bi_filter(g, a),
        Command::Gradcheck(a) => checks::gradcheck(g, a),
        Command::Bench(a) => checks::bench(g, a),
        Command::OracleDiff(a) => checks::oracle_diff(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(3)
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}
