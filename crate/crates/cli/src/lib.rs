//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and maps failures onto exit codes: 1 usage, 2 data, 3 numerical.

mod commands;
mod config;
pub mod overlay;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::FileConfig;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "atlaseg",
    version,
    about = "Multi-atlas and probabilistic-atlas volume segmentation"
)]
pub struct Cli {
    /// JSON configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RegistrationFlags {
    /// Pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// MI histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Optimiser iterations per level.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Comma-separated stage list, e.g. `affine,ffd`.
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register a moving image to a fixed image.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Transform document to write.
        #[arg(long)]
        out: PathBuf,
        /// Report with cost traces (default: next to the transform).
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        reg: RegistrationFlags,
    },
    /// Resample an image or label volume through a transform onto a reference grid.
    Warp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        transform: PathBuf,
        /// Image supplying the output grid.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// nearest, linear or cubic (labels always use nearest).
        #[arg(long, default_value = "cubic")]
        interp: String,
        /// Treat the input as a label volume.
        #[arg(long)]
        labels: bool,
    },
    /// Build a probabilistic atlas in the space of a reference image.
    BuildAtlas {
        /// Target image defining the atlas space.
        #[arg(long)]
        reference: PathBuf,
        /// Dataset directory with `<id>_image.nii.gz` / `<id>_label.nii.gz` pairs.
        #[arg(long)]
        data: PathBuf,
        /// Member ids to leave out.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        /// Register every member to the reference (otherwise members must already be aligned).
        #[arg(long)]
        register: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        reg: RegistrationFlags,
    },
    /// Estimate per-class intensity histograms from training segmentations.
    TissueModel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Histogram bins.
        #[arg(long)]
        n_bins: Option<usize>,
    },
    /// Fuse deformed label volumes.
    Fuse {
        /// mvf or median.
        #[arg(long)]
        method: String,
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Count only foreground votes.
        #[arg(long)]
        exclude_background_votes: bool,
    },
    /// Segment a target with an atlas: pas, em or pas+em.
    Segment {
        #[arg(long)]
        method: String,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        tissue_model: Option<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prior regularisation weight.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Register the atlas mean image to the target and warp the priors first.
        #[arg(long)]
        register_atlas: bool,
        /// Also write the per-class probabilities as a 4D image.
        #[arg(long)]
        posterior: Option<PathBuf>,
        /// Also write the EM parameter trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        reg: RegistrationFlags,
    },
    /// Compare a segmentation with ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also report slice-averaged metrics.
        #[arg(long)]
        slice_mean: bool,
        /// Report file (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-out experiment over a dataset directory.
    Loo {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated methods.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "mvf,median,pas,em,pas+em"
        )]
        method: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        slice_mean: bool,
        #[arg(long)]
        n_bins: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        exclude_background_votes: bool,
        #[command(flatten)]
        reg: RegistrationFlags,
    },
    /// Write a synthetic phantom dataset with ground-truth transforms.
    Phantom {
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest FFD displacement in voxels.
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one axial slice with label contours as PNG.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<atlaseg::Error> for CliError {
    fn from(e: atlaseg::Error) -> Self {
        CliError {
            code: if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            },
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATLASEG_LOG", "warn"))
        .format_timestamp_millis()
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let go = || commands::dispatch(&cli.command, &cfg);
    match cli.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::usage(format!("cannot start {n} workers: {e}")))?
            .install(go),
        None => go(),
    }
}
