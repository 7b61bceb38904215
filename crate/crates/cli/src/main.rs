//! `gcnm`: mesh generation, simulation, training, reconstruction,
//! evaluation and rendering for absolute EIT.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "gcnm", version, about = "Absolute EIT with graph convolutional Newton-type reconstruction")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Directory receiving all artifacts. Overrides `output_root` in the config.
    #[arg(long, global = true, env = "GCNM_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,

    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Force sequential, bit-reproducible reductions.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the forward and inverse meshes of a case.
    Mesh {
        /// Case whose geometry to mesh; 1 is the training circle.
        #[arg(long, default_value_t = 1)]
        case: u8,
        #[arg(long)]
        elements: Option<usize>,
    },
    /// Simulate the training dataset on the case-1 meshes.
    Simulate {
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        nu: Option<f64>,
    },
    /// Train a learned reconstruction model on the simulated dataset.
    Train {
        #[arg(value_enum)]
        model: ModelKind,
        #[command(flatten)]
        opts: TrainArgs,
    },
    /// Reconstruct one sample of a dataset.
    Reconstruct {
        #[arg(long, value_enum)]
        method: ReconMethod,
        /// Dataset file; defaults to the training dataset of the run.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Inverse mesh of the dataset; defaults to the run's case-1 mesh.
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// λ of the method: LM damping, TV weight, or the GCNM override.
        #[arg(long)]
        lambda: Option<f64>,
        /// Input scaling of the learned methods.
        #[arg(long)]
        scale: Option<f64>,
        /// Model checkpoint; defaults to the run's trained model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the evaluation cases and write per-sample and aggregate CSVs.
    Evaluate {
        /// Case ids, e.g. `1,2,6`.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u8])]
        cases: Vec<u8>,
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Option<Vec<ReconMethod>>,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Render a reconstruction (or a dataset truth) to PNG.
    Render {
        /// Reconstruction file written by `reconstruct`.
        #[arg(long)]
        recon: Option<PathBuf>,
        /// Dataset supplying the truth and the colour range.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Render the truth instead of a reconstruction.
        #[arg(long)]
        truth: bool,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the blocks already in the checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Gcnm,
    Gresnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReconMethod {
    Lm,
    Tv,
    Gcnm,
    Gcnm2,
    Gresnet,
}

/// Exit code for an error chain: 2 configuration, 3 numerical, 4 lineage,
/// 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use gcnm_core::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Geometry(_) | E::Domain(_) | E::Usage(_) => 2,
                E::Numerical(_) => 3,
                E::Lineage(_) => 4,
                E::Format(_) | E::Io(_) | E::Json(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
