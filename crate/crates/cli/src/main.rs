mod config;
mod pipeline;
mod report;
mod synth;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gazeswap_core::dataset_io::{duplicate_face_ids, read_jsonl, ImageAnnotation, RecordIssue, Records, Validate};
use gazeswap_core::eval::BinAxis;
use serde::de::DeserializeOwned;

#[derive(Debug, Parser)]
#[command(
    name = "gazeswap",
    version,
    about = "Gaze-swap dataset synthesis, evaluation and annotation"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Optional `key = value` file; keys are long flag names. Flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pick a gaze-pool face for every candidate face.
    Match(MatchArgs),
    /// Swap matched faces and write images plus swap outcomes.
    Swap(SwapArgs),
    /// Angular error binned by face width or by gaze angle.
    Eval(EvalArgs),
    /// Gaze sensitivity curve and the plane quantization comparison as CSV.
    GsReport(GsReportArgs),
    /// Check analytic loss gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Fit a linear head with the full loss on a realizable toy problem.
    Toyfit(ToyfitArgs),
    /// Dataset and swap statistics as JSON.
    Stats(StatsArgs),
    /// Run the annotation HTTP service.
    Annotate(AnnotateArgs),
    /// Write a small synthetic dataset usable by every other subcommand.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Candidate faces (face records).
    #[arg(long)]
    pub faces: PathBuf,
    /// Attributes of the candidate faces.
    #[arg(long)]
    pub wider_attrs: PathBuf,
    /// Attributes of the gaze-pool faces.
    #[arg(long)]
    pub xgaze_attrs: PathBuf,
    /// Output match records.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub topn: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_lmk: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_pose: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta_age: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta_race: f64,
    /// Distances below this swap only the eye region.
    #[arg(long, default_value_t = 2.0)]
    pub eye_threshold: f64,
    /// Exhaustive search without the top-n cut.
    #[arg(long)]
    pub brute_force: bool,
    #[command(flatten)]
    pub norm: NormArgs,
}

#[derive(Debug, Args)]
pub struct NormArgs {
    /// 3D face model (`name x y z` rows); the built-in 6-point model if absent.
    #[arg(long)]
    pub face_model: Option<PathBuf>,
    /// Virtual camera distance, mm.
    #[arg(long, default_value_t = 600.0)]
    pub d_norm: f64,
    /// Virtual focal length, pixels.
    #[arg(long, default_value_t = 960.0)]
    pub f_norm: f64,
    /// Normalized crop side, pixels.
    #[arg(long, default_value_t = 224)]
    pub crop: usize,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    #[arg(long)]
    pub faces: PathBuf,
    #[arg(long)]
    pub matches: PathBuf,
    /// Gaze-pool samples: normalized crops with their gaze labels.
    #[arg(long)]
    pub gaze_pool: PathBuf,
    /// Receives one PNG per swapped face and `outcomes.jsonl`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Relative residual at which the blend solver stops.
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iterations: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground truth: image annotations with gaze labels.
    #[arg(long)]
    pub gt: PathBuf,
    /// Prediction records.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value = "width")]
    pub bins: BinAxis,
    /// Print CSV instead of a table.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct GsReportArgs {
    #[arg(long, default_value_t = 100.0)]
    pub radius: f64,
    /// Quantization step on the projection plane.
    #[arg(long, default_value_t = 1.0)]
    pub pixel: f64,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Write `gs_curve.csv` and `quantization.csv` here instead of stdout.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 6)]
    pub anchors: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Fail above this relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub max_error: f64,
}

#[derive(Debug, Args)]
pub struct ToyfitArgs {
    #[arg(long, default_value_t = 48)]
    pub anchors: usize,
    #[arg(long, default_value_t = 16)]
    pub positives: usize,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_p: f64,
    /// Both rates decay geometrically to this fraction by the last step.
    #[arg(long, default_value_t = 1e-3)]
    pub lr_final_fraction: f64,
    /// Lower bound on the log-variance weights; pass `none` to leave them free.
    #[arg(long, default_value = "0")]
    pub p_floor: String,
    /// Seed of the generated problem (the run seed drives initialization).
    #[arg(long, default_value_t = 42)]
    pub problem_seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Write the per-step loss and weights as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Swap outcomes, for swapped/skipped counts.
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Holds `annotations.jsonl`, the images, and the label log.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of candidate images.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    /// Number of gaze-pool faces.
    #[arg(long, default_value_t = 12)]
    pub pool: usize,
}

/// Reads a JSON-lines file, failing with every invalid line listed.
pub fn read_records<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    read_checked(path, |_| Vec::new())
}

/// Image annotations, additionally rejecting face ids repeated across images.
pub fn read_annotations(path: &Path) -> Result<Vec<ImageAnnotation>> {
    read_checked(path, duplicate_face_ids)
}

fn read_checked<T: DeserializeOwned + Validate>(
    path: &Path,
    extra: impl Fn(&Records<T>) -> Vec<RecordIssue>,
) -> Result<Vec<T>> {
    let recs = read_jsonl::<T>(path)?;
    let mut issues = recs.issues.clone();
    issues.extend(extra(&recs));
    if !issues.is_empty() {
        let mut msg = format!("{}: {} invalid record(s)", path.display(), issues.len());
        for issue in issues.iter().take(20) {
            msg.push_str(&format!("\n  {issue}"));
        }
        if issues.len() > 20 {
            msg.push_str(&format!("\n  ... and {} more", issues.len() - 20));
        }
        bail!(msg);
    }
    Ok(recs.records)
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
pub fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing to stdout"),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Match(a) => pipeline::run_match(&a),
        Command::Swap(a) => pipeline::run_swap(&a),
        Command::Eval(a) => report::run_eval(&a),
        Command::GsReport(a) => report::run_gs_report(&a, cli.seed),
        Command::Gradcheck(a) => report::run_gradcheck(&a, cli.seed),
        Command::Toyfit(a) => report::run_toyfit(&a, cli.seed),
        Command::Stats(a) => report::run_stats(&a),
        Command::Annotate(a) => run_annotate(&a),
        Command::Synth(a) => synth::run_synth(&a, cli.seed),
    }
}

fn run_annotate(a: &AnnotateArgs) -> Result<()> {
    let store = gazeswap_annotate::Store::open(&a.data_dir)
        .with_context(|| format!("opening annotation data in {}", a.data_dir.display()))?;
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(gazeswap_annotate::serve(
        addr,
        std::sync::Arc::new(store),
        a.ui_dir.clone(),
    ))
    .with_context(|| format!("serving on {addr}"))
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
