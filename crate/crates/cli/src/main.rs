//! `guikv` command-line driver.
//!
//! Exit codes: 0 success, 2 usage, 3 unreadable or malformed input,
//! 4 numeric or validation failure.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guikv::pixel_saliency::PixelMethod;
use guikv::policy::Policy;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "guikv", version, about = "KV-cache compression for multi-screenshot GUI prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trajectory trace file.
    Gen(GenArgs),
    /// Select the tokens to keep for one method and budget.
    Compress(CompressArgs),
    /// Evaluate a grid of methods, budgets and ranks.
    Sweep(SweepArgs),
    /// Per-layer, per-head attention sparsity.
    Sparsity(SparsityArgs),
    /// Decode and compression FLOPs for a model configuration.
    Flops(FlopsArgs),
    /// Patch saliency scores for a PGM/PPM image.
    PixelSaliency(PixelArgs),
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: guikv::Error| e.to_string())
}

fn parse_pixel_method(s: &str) -> Result<PixelMethod, String> {
    s.parse().map_err(|e: guikv::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Screenshots, current one included.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub tokens_per_frame: Option<usize>,
    #[arg(long)]
    pub text_prefix: Option<usize>,
    #[arg(long)]
    pub text_suffix: Option<usize>,
    #[arg(long)]
    pub omega: Option<usize>,
    /// Share of each frame copied from the previous one.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub register_fraction: Option<f64>,
    #[arg(long)]
    pub register_scale: Option<f64>,
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Leave value tensors out of the file.
    #[arg(long)]
    pub no_values: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ScoringArgs {
    #[arg(long, default_value_t = guikv::cache_model::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = guikv::cache_model::DEFAULT_TAU)]
    pub tau: f64,
    /// Observation window; defaults to the trace's.
    #[arg(long)]
    pub omega: Option<usize>,
    /// Max-pool width over visual tokens; 1 disables pooling.
    #[arg(long, default_value_t = guikv::cache_model::DEFAULT_POOL_KERNEL)]
    pub pool_kernel: usize,
    #[arg(long, default_value_t = guikv::baselines::DEFAULT_PYRAMID_BETA)]
    pub pyramid_beta: f64,
    #[arg(long, default_value_t = guikv::baselines::DEFAULT_SINK_TOKENS)]
    pub sink_tokens: usize,
    /// Relative threshold used for the sparsity-driven baseline.
    #[arg(long, default_value_t = guikv::sparsity::DEFAULT_P)]
    pub p: f64,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    pub trace: PathBuf,
    #[arg(long, value_parser = parse_policy, default_value = "gui-kv")]
    pub method: Policy,
    /// Fraction of tokens kept per head.
    #[arg(long)]
    pub budget: f64,
    /// QR rank r of the current-frame key basis.
    #[arg(long, default_value_t = guikv::cache_model::DEFAULT_RANK)]
    pub rank: usize,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Replace current-frame hidden norms with pixel saliency of this image.
    #[arg(long)]
    pub saliency_image: Option<PathBuf>,
    #[arg(long, value_parser = parse_pixel_method, default_value = "sobel")]
    pub saliency_method: PixelMethod,
    #[arg(long, default_value_t = guikv::pixel_saliency::DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    /// KeepSet JSON destination; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Score-sheet CSV destination (scoring methods only).
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    pub trace: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_policy,
          default_value = "gui-kv,snapkv,pyramidkv,vl-cache,recency")]
    pub methods: Vec<Policy>,
    #[arg(long, value_delimiter = ',',
          default_value = "0.01,0.03,0.05,0.1,0.15,0.2,0.4,0.8,1.0")]
    pub budgets: Vec<f64>,
    /// QR ranks r to try.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub ranks: Vec<usize>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// CSV destination; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Full run report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Record wall time in the report (makes it run-dependent).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
pub struct SparsityArgs {
    pub trace: PathBuf,
    #[arg(long, default_value_t = guikv::sparsity::DEFAULT_P)]
    pub p: f64,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    pub format: String,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub screenshots: usize,
    #[arg(long)]
    pub budget: f64,
    #[arg(long, default_value_t = guikv::cache_model::DEFAULT_OMEGA)]
    pub omega: usize,
    #[arg(long, default_value_t = guikv::cache_model::DEFAULT_RANK)]
    pub rank: usize,
    /// Model configuration JSON; the calibrated built-in model when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PixelArgs {
    pub image: PathBuf,
    #[arg(long, value_parser = parse_pixel_method, default_value = "sobel")]
    pub method: PixelMethod,
    #[arg(long, default_value_t = guikv::pixel_saliency::DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    #[arg(long, default_value_t = guikv::cache_model::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() {
    if let Some(n) = std::env::var("GUIKV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Compress(a) => commands::compress(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Sparsity(a) => commands::sparsity(a),
        Command::Flops(a) => commands::flops(a),
        Command::PixelSaliency(a) => commands::pixel_saliency(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
