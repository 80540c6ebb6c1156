//! Command-line entry point: dataset synthesis, model learning, fitting,
//! rendering, gradient checking and evaluation as one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

mod commands;

#[derive(Parser)]
#[command(name = "facefit", version, about = "Multi-frame face model learning and inverse rendering")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// key=value config file overriding built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every randomized step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force deterministic ordered reductions. Reductions always run in a
    /// fixed order in this implementation, so this flag is accepted and
    /// recorded but changes nothing.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-frame dataset with stored ground truth
    Generate {
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects
        #[arg(long)]
        subjects: Option<usize>,
        /// Frames per subject
        #[arg(long)]
        frames: Option<usize>,
        /// Square image size in pixels
        #[arg(long)]
        size: Option<usize>,
        /// Mesh file (default: built-in procedural face mask)
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Landmark sidecar for --mesh (default: <mesh>.lmk)
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Blendshape archive (default: built-in synthetic basis)
        #[arg(long)]
        blendshapes: Option<PathBuf>,
    },
    /// Learn a model from a dataset with the staged schedule
    Learn {
        /// Dataset directory (manifest.txt layout)
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for checkpoints, model and logs
        #[arg(long)]
        out: PathBuf,
        /// Resume from a state checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Restrict every sample to its first m frames
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Fit identity and per-frame parameters against a frozen model
    Fit {
        /// Trained model archive
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory
        #[arg(long)]
        dataset: PathBuf,
        /// Subject to fit (default: every subject in the manifest)
        #[arg(long)]
        subject: Option<String>,
        /// Use only the first m frames of each sample
        #[arg(long)]
        frames: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a model: geometry shading, albedo, lit render, overlay
    Render {
        /// Model archive
        #[arg(long)]
        model: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Head yaw in degrees
        #[arg(long, default_value_t = 0.0)]
        yaw: f64,
        /// Square image size in pixels
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Check tape gradients against central finite differences
    Gradcheck {
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Relative tolerance per coordinate
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Coordinates checked per block
        #[arg(long, default_value_t = 120)]
        max_coords: usize,
        /// Check a single block (default: all)
        #[arg(long)]
        block: Option<String>,
    },
    /// Evaluate fit results against stored ground truth
    Eval {
        /// Dataset directory with ground truth
        #[arg(long)]
        dataset: PathBuf,
        /// Directory with params_<subject>.arc fit outputs
        #[arg(long)]
        fits: PathBuf,
        /// Output directory for the report
        #[arg(long)]
        out: PathBuf,
        /// Condition label for the summary table
        #[arg(long, default_value = "fit")]
        condition: String,
    },
}

fn main() {
    // our own logs are plain text; clap's usage output goes through anstream,
    // which honors the NO_COLOR environment variable
    let cli = Cli::parse();
    if let Some(threads) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    let result = match cli.command {
        Command::Generate { out, subjects, frames, size, mesh, landmarks, blendshapes } => {
            commands::generate(&cli.global, out, subjects, frames, size, mesh, landmarks, blendshapes)
        }
        Command::Learn { dataset, out, resume, frames } => {
            commands::learn(&cli.global, dataset, out, resume, frames)
        }
        Command::Fit { model, dataset, subject, frames, out } => {
            commands::fit(&cli.global, model, dataset, subject, frames, out)
        }
        Command::Render { model, out, yaw, size } => commands::render(&cli.global, model, out, yaw, size),
        Command::Gradcheck { step, tolerance, max_coords, block } => {
            commands::gradcheck(&cli.global, step, tolerance, max_coords, block)
        }
        Command::Eval { dataset, fits, out, condition } => {
            commands::eval(&cli.global, dataset, fits, out, condition)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

impl GlobalArgs {
    fn settings(&self) -> anyhow::Result<facefit::config::Settings> {
        match &self.config {
            Some(path) => facefit::config::Settings::from_file(path)
                .with_context(|| format!("loading config {}", path.display())),
            None => Ok(facefit::config::Settings::default()),
        }
    }

    fn run_metadata(&self) -> String {
        format!(
            "seed={}\ndeterministic={}\nthreads={}\n",
            self.seed,
            self.deterministic,
            self.threads.map(|t| t.to_string()).unwrap_or_else(|| "auto".into())
        )
    }
}

fn ensure_dir(path: &std::path::Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn require_nonempty<T>(items: &[T], what: &str) -> anyhow::Result<()> {
    if items.is_empty() {
        bail!("{what} is empty");
    }
    Ok(())
}
