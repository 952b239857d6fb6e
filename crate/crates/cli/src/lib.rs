//! `extremeseg` command line: phantom data, planning, preprocessing,
//! training, inference, evaluation and the HTTP service.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "extremeseg", version, about = "Extreme-point guided 3D tumor segmentation")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = available parallelism).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom cases and a manifest.
    Phantom(PhantomArgs),
    /// Derive six extreme clicks from a reference mask.
    SimulateClicks(SimulateClicksArgs),
    /// Derive a pipeline plan from a dataset manifest.
    Plan(PlanArgs),
    /// Resample, crop and normalise one case; write the network inputs.
    Preprocess(PreprocessArgs),
    /// Train a k-fold ensemble.
    Train(TrainArgs),
    /// Segment one case with a trained ensemble.
    Infer(InferArgs),
    /// Compare predicted masks with references.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Ct,
    MrT1,
    MrT2fs,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    World,
    Voxel,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of cases.
    #[arg(long)]
    pub n: usize,
    /// Output directory (default: the data root).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the first case; case i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid size as nx,ny,nz.
    #[arg(long, value_parser = triple::<usize>)]
    pub dims: Option<[usize; 3]>,
    /// Voxel spacing in mm as sx,sy,sz.
    #[arg(long, value_parser = triple::<f64>)]
    pub spacing: Option<[f64; 3]>,
    /// Add a second, similar-looking blob that is not the target.
    #[arg(long)]
    pub distractor: bool,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    /// Gaussian noise sigma.
    #[arg(long)]
    pub noise: Option<f32>,
}

#[derive(Debug, Args)]
pub struct SimulateClicksArgs {
    /// Reference mask (MVOL).
    #[arg(long)]
    pub mask: PathBuf,
    /// Output clicks JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Coordinate space of the written points.
    #[arg(long, value_enum, default_value = "world")]
    pub space: SpaceArg,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Dataset manifest (default: manifest.json under the data root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Upper bound on resolution levels.
    #[arg(long)]
    pub max_levels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Image (MVOL).
    #[arg(long)]
    pub case: PathBuf,
    /// Clicks JSON (required unless --automatic).
    #[arg(long)]
    pub clicks: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Whole-volume input without clicks.
    #[arg(long)]
    pub automatic: bool,
    /// Automatic-mode grid bound as nx,ny,nz.
    #[arg(long, value_parser = triple::<usize>)]
    pub budget: Option<[usize; 3]>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Dataset manifest (default: manifest.json under the data root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Models directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train without clicks on whole volumes.
    #[arg(long)]
    pub automatic: bool,
    /// Automatic-mode grid bound as nx,ny,nz.
    #[arg(long, value_parser = triple::<usize>)]
    pub budget: Option<[usize; 3]>,
    /// Keep training clicks at their exact extreme positions.
    #[arg(long)]
    pub no_click_jitter: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Plan; must match the one stored with the models.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Models directory or its ensemble.json.
    #[arg(long)]
    pub models: PathBuf,
    /// Image (MVOL or NIfTI-1).
    #[arg(long)]
    pub case: PathBuf,
    /// Clicks JSON (required unless --automatic).
    #[arg(long)]
    pub clicks: Option<PathBuf>,
    /// Output mask (MVOL).
    #[arg(long)]
    pub out: PathBuf,
    /// Expect an automatic-mode ensemble and ignore clicks.
    #[arg(long)]
    pub automatic: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference masks.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-case rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Plan; must match the one stored with the models.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub max_upload_bytes: Option<usize>,
}

/// `a,b,c` as three values.
fn triple<T: FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated values, got \"{s}\""));
    };
    let one = |x: &str| x.trim().parse::<T>().map_err(|_| format!("bad value \"{x}\""));
    Ok([one(a)?, one(b)?, one(c)?])
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
