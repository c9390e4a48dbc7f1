pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use capsib_core::Precision;
use clap::{Args, Parser, Subcommand};

use commands::{Anchors, Ctx, SweepArgs, TraversalSpec};
use config::{Overrides, Preset};
use error::Result;

#[derive(Debug, Parser)]
#[command(name = "capsib", version, about = "Capsule networks with an information penalty on the class capsule")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct Global {
    /// Flat JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "CAPSIB_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Base training settings (default: paper).
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub architecture: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub routing_iterations: Option<usize>,
    #[arg(long, global = true)]
    pub train_samples: Option<usize>,
    #[arg(long, global = true)]
    pub test_samples: Option<usize>,
    #[arg(long, global = true)]
    pub capsule_dim: Option<usize>,
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            architecture: self.architecture.clone(),
            seed: self.seed,
            beta: self.beta,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            routing_iterations: self.routing_iterations,
            train_samples: self.train_samples,
            test_samples: self.test_samples,
            capsule_dim: self.capsule_dim,
            precision: self.precision,
        }
    }

    fn ctx(&self) -> Ctx {
        Ctx {
            data_dir: self.data_dir.clone(),
            out_dir: self.out_dir.clone(),
            test_samples: self.test_samples,
            epochs: self.epochs,
            model_explicit: self.config.is_some() || self.architecture.is_some() || self.capsule_dim.is_some(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, writing metrics.csv and checkpoint.ckpt.
    Train {
        /// Continue from a checkpoint, up to --epochs if given. Training
        /// settings come from the checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train a grid of beta × capsule dim × seed and report trend verdicts.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        betas: Vec<f64>,
        /// Capsule dims (default: the config's).
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        /// Seeds (default: the config's).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Keep finished cells from an earlier sweep with the same config.
        #[arg(long)]
        reuse: bool,
    },
    /// Grid of test inputs above their reconstructions.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Decode while sweeping one representation component.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        component: usize,
        #[arg(long, default_value_t = -0.08, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 0.08, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        /// Test-sample indices to start from (default: 8 samples covering
        /// distinct predicted classes).
        #[arg(long, value_delimiter = ',', conflicts_with = "zero_anchor")]
        anchors: Vec<usize>,
        /// Start from the all-zero representation instead.
        #[arg(long)]
        zero_anchor: bool,
    },
    /// Print the architecture, parameter table and latent statistics.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics CSV to summarise (default: metrics.csv next to the checkpoint).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

pub const DEFAULT_ANCHORS: usize = 8;

/// Runs a parsed command; the returned lines go to stdout.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    let g = &cli.global;
    let ctx = g.ctx();
    let resolve = || config::resolve(g.preset, g.config.as_deref(), &g.overrides());
    match cli.command {
        Command::Train { resume } => commands::train(&ctx, &resolve()?, resume.as_deref()),
        Command::Eval { checkpoint } => commands::eval(&ctx, &checkpoint),
        Command::Sweep { betas, dims, seeds, reuse } => {
            commands::sweep(&ctx, &resolve()?, &SweepArgs { betas, dims, seeds, reuse })
        }
        Command::Reconstruct { checkpoint, n } => commands::reconstruct(&ctx, &checkpoint, n),
        Command::Traverse { checkpoint, component, lo, hi, steps, anchors, zero_anchor } => {
            let anchors = match (zero_anchor, anchors.is_empty()) {
                (true, _) => Anchors::Zero,
                (false, true) => Anchors::Default(DEFAULT_ANCHORS),
                (false, false) => Anchors::Indices(anchors),
            };
            commands::traverse(&ctx, &checkpoint, &TraversalSpec { component, lo, hi, steps }, &anchors)
        }
        Command::Inspect { checkpoint, metrics } => {
            let resolved = if checkpoint.is_none() { Some(resolve()?) } else { None };
            commands::inspect(&ctx, resolved.as_ref(), checkpoint.as_deref(), metrics.as_deref())
        }
    }
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            eprint!("{}", e.render());
            return code;
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
