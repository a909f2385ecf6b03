//! `speckle-ddpm`: synthesize, self-fuse, train, denoise, sweep and evaluate.
//!
//! Exit codes: 0 success, 2 usage error (bad flags, missing or malformed
//! inputs), 1 runtime failure. Failures print one JSON line to stderr:
//! `{"error":{"kind":"usage"|"runtime","message":"..."}}`.

mod commands;
mod eval;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable holding the external registration command template.
pub const REGISTER_CMD_ENV: &str = "SPECKLE_DDPM_REGISTER_CMD";

#[derive(Debug, Parser)]
#[command(name = "speckle-ddpm", version, about = "Diffusion-model denoising of speckled b-scans")]
struct Cli {
    /// Worker threads for per-image work (defaults to the core count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic speckle phantom volumes and a dataset manifest.
    Synth(SynthArgs),
    /// Build high-SNR references by fusing registered neighbouring slices.
    Selffuse(SelffuseArgs),
    /// Train the noise predictor on the slices of a manifest.
    Train(TrainArgs),
    /// Denoise one image starting the reverse chain at step --t.
    Denoise(DenoiseArgs),
    /// Denoise one image for several starting steps and write a grid.
    Sweep(SweepArgs),
    /// Compute SNR/PSNR/CNR/ENL for a set of images and paired t-tests.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpeckleKind {
    Gamma,
    Gaussian,
    None,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of phantom volumes.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Image height and width.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Slices per volume.
    #[arg(long, default_value_t = 7)]
    pub slices: usize,
    /// Largest per-slice translation in pixels.
    #[arg(long, default_value_t = 2)]
    pub max_shift: usize,
    #[arg(long, value_enum, default_value_t = SpeckleKind::Gamma)]
    pub speckle: SpeckleKind,
    /// Gamma shape (speckle = gamma); larger is less noisy.
    #[arg(long, default_value_t = 10.0)]
    pub shape: f64,
    /// Noise standard deviation in intensity units (speckle = gaussian).
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Trailing volumes marked `split: "test"`; the rest are `"train"`.
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SelffuseArgs {
    /// Volume file or directory; omit when --manifest is given.
    pub volume: Option<PathBuf>,
    /// Fuse every volume of a dataset manifest and write a new manifest.
    #[arg(long, conflicts_with = "volume")]
    pub manifest: Option<PathBuf>,
    /// JSON file with fusion settings (radius, bandwidth, registration, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodKind>,
    /// Shift search window for --method translation.
    #[arg(long)]
    pub max_shift: Option<usize>,
    /// `auto`, `uniform`, or a positive number.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Command template for --method external (else read from the
    /// SPECKLE_DDPM_REGISTER_CMD environment variable).
    #[arg(long)]
    pub register_cmd: Option<String>,
    /// Concurrent external registrations.
    #[arg(long)]
    pub max_parallel: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodKind {
    None,
    Translation,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NetworkPreset {
    Desk,
    PaperScale,
    Tiny,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingKind {
    Simplified,
    Eq8Weighted,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest of (fused) reference volumes.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON training configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Only use manifest entries with this split (entries without a split
    /// are always used).
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_halving_period: Option<usize>,
    #[arg(long, value_enum)]
    pub loss_weighting: Option<WeightingKind>,
    #[arg(long, value_enum)]
    pub network: Option<NetworkPreset>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint instead of initialising a new network.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss CSV (defaults to the checkpoint path with a .csv extension).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImageInput {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (.raw, .png, .tif); must already be in [-1, 1] unless
    /// --normalize is given.
    pub image: PathBuf,
    /// Slice of a multi-slice input.
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
    /// Min-max normalize the input to [-1, 1] first.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub input: ImageInput,
    /// Starting step; 0 returns the input.
    #[arg(long)]
    pub t: usize,
    /// Output image; format follows the extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: ImageInput,
    /// Comma-separated starting steps.
    #[arg(long, value_delimiter = ',', required = true)]
    pub t_list: Vec<usize>,
    /// Output directory for `t_XXX.<ext>` images and `grid.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-t image format.
    #[arg(long, default_value = "raw")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluation manifest: {"images": [{"id", "method", "path", "reference"?}]}.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reference image for entries without their own.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// ROI set (JSON).
    #[arg(long)]
    pub rois: PathBuf,
    /// Per-image metrics CSV; a JSON report is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Method the others are tested against.
    #[arg(long, default_value = "noisy")]
    pub baseline: String,
    /// Compute metrics on the stored [-1, 1] values instead of mapping them
    /// back to [0, 1] intensities.
    #[arg(long)]
    pub normalized_domain: bool,
}

/// A CLI failure tagged with its exit class.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn parts(&self) -> (&'static str, &anyhow::Error, u8) {
        match self {
            Failure::Usage(e) => ("usage", e, 2),
            Failure::Runtime(e) => ("runtime", e, 1),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Shorthand for tagging errors.
pub trait Tag<T> {
    fn usage(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Input errors (unreadable or malformed files, bad settings) are usage
/// errors; everything else is a runtime failure.
pub fn classify(e: speckle_ddpm::Error) -> Failure {
    use speckle_ddpm::Error as E;
    match e {
        E::Config(_) | E::Format { .. } | E::StepOutOfRange { .. } | E::Size(_) => Failure::Usage(e.into()),
        E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.into()),
        _ => Failure::Runtime(e.into()),
    }
}

pub trait Classify<T> {
    fn classify(self) -> CliResult<T>;
}

impl<T> Classify<T> for speckle_ddpm::Result<T> {
    fn classify(self) -> CliResult<T> {
        self.map_err(classify)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.sequential {
        speckle_ddpm::par::set_execution(speckle_ddpm::par::Execution::Sequential);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow::anyhow!("--threads must be at least 1")));
        }
        speckle_ddpm::par::init_threads(n).runtime()?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Selffuse(a) => commands::selffuse(a),
        Command::Train(a) => commands::train(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Eval(a) => eval::run(a),
    }
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn chain_message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if !out.contains(&s) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&s);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.kind().to_string();
            eprintln!("{}", serde_json::json!({"error": {"kind": "usage", "message": msg}}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, err, code) = f.parts();
            let message = chain_message(err);
            eprintln!("{}", serde_json::json!({"error": {"kind": kind, "message": message}}));
            ExitCode::from(code)
        }
    }
}
