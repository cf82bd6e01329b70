//! `humanwarp`: reproducible batch runs over synthetic or stored sequences.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use humanwarp::losses::{LossSelector, LossWeights};
use humanwarp::warp::WarpKind;

#[derive(Parser, Debug)]
#[command(name = "humanwarp", version, about = "Part-based warping, self-supervision losses and evaluation for human depth")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic sequence from a scene file.
    Synth(SynthArgs),
    /// Sample frame pairs and apply the noisy-pair filter.
    Pairs(PairsArgs),
    /// Fit per-part warps for every valid pair.
    Fit(FitArgs),
    /// Itemised losses and residual heatmaps for every valid pair.
    Loss(LossArgs),
    /// Compare analytic depth gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Per-part reconstruction uncertainty against a reference frame.
    Uncertainty(UncertaintyArgs),
    /// Refine a noisy depth map with the self-supervised losses.
    Refine(RefineArgs),
    /// Scale-aligned depth, normal and reconstruction errors.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the frame count of the scene file.
    #[arg(long)]
    frames: Option<usize>,
    /// Overrides the motion of the scene file: static, spin:DEG or roll90.
    #[arg(long)]
    motion: Option<String>,
}

#[derive(Args, Debug)]
pub struct PairsArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    gap: usize,
    #[arg(long, default_value_t = 5)]
    per_frame: usize,
    #[arg(long, default_value_t = 5)]
    min_parts: usize,
    /// A part is shared when it has more than this many correspondences.
    #[arg(long, default_value_t = 50)]
    min_corr: usize,
    #[arg(long, default_value_t = 64)]
    bins: usize,
}

#[derive(Args, Debug, Clone)]
pub struct FitFlags {
    #[arg(long, default_value = "affine", value_parser = parse_kind)]
    kind: WarpKind,
    /// Drop the worst 10% of residuals and refit once.
    #[arg(long)]
    trimmed: bool,
    #[arg(long, default_value_t = 16)]
    fit_bins: usize,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
pub struct LossArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predicted depth (and normals) in sequence layout; the sequence itself
    /// when absent.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// lambda_n,lambda_s,lambda_w,lambda_p
    #[arg(long, default_value = "1,0.5,5,5", value_parser = parse_weights)]
    weights: LossWeights,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// w, s, p or z.
    #[arg(long, value_parser = parse_selector)]
    loss: LossSelector,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Partner frame; the first frame at least 5 apart when absent.
    #[arg(long)]
    partner: Option<usize>,
    /// Gaussian depth noise (m) added before the check, so that L_z has a
    /// gradient.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
pub struct UncertaintyArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "ref", default_value_t = 0)]
    reference: usize,
    /// Frames to use; all frames when absent.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    /// Use the stored ground-truth transforms instead of fitted warps.
    #[arg(long)]
    true_warps: bool,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Gaussian noise (m) added to the refined frame.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    step_size: f64,
    /// Partner frames; frame+5, +10, +15 (then -5, -10, -15) when absent.
    #[arg(long, value_delimiter = ',')]
    partners: Option<Vec<usize>>,
    #[arg(long, default_value = "1,0.5,5,5", value_parser = parse_weights)]
    weights: LossWeights,
    /// Add the photometric term. The baked checker texture lets depth slide
    /// to a lower L_p, so it is off by default.
    #[arg(long)]
    photometric: bool,
    /// Add normal consistency against the sequence normals. Stable only with
    /// a smaller step, e.g. `--step-size 1e-5`.
    #[arg(long)]
    normals: bool,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Centimeters.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    depth_th: Vec<f64>,
    /// Degrees.
    #[arg(long, value_delimiter = ',', default_value = "25,30,35")]
    normal_th: Vec<f64>,
    /// Frames to score; every ground-truth frame when absent.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    /// Row label in the Markdown tables.
    #[arg(long, default_value = "prediction")]
    method: String,
}

fn parse_kind(s: &str) -> Result<WarpKind, String> {
    s.parse().map_err(|e: humanwarp::Error| e.to_string())
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    s.parse().map_err(|e: humanwarp::Error| e.to_string())
}

fn parse_selector(s: &str) -> Result<LossSelector, String> {
    let sel: LossSelector = s.parse().map_err(|e: humanwarp::Error| e.to_string())?;
    match sel {
        LossSelector::Warping | LossSelector::Consistency | LossSelector::Photometric | LossSelector::Depth => Ok(sel),
        LossSelector::Normal => Err("L_n has no depth gradient; choose w, s, p or z".into()),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HUMANWARP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("HUMANWARP_THREADS must be a non-negative integer, got `{raw}`"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pairs(a) => commands::pairs(&a, seed),
        Command::Fit(a) => commands::fit(&a),
        Command::Loss(a) => commands::loss(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a, seed),
        Command::Uncertainty(a) => commands::uncertainty(&a),
        Command::Refine(a) => commands::refine(&a, seed),
        Command::Eval(a) => {
            if a.depth_th.is_empty() || a.normal_th.is_empty() {
                bail!("threshold lists must not be empty");
            }
            commands::eval(&a)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
