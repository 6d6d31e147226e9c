mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "hifi",
    version,
    about = "High-frequency guided reference inpainting toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic samples and a manifest.
    GenData(GenDataArgs),
    /// Score samples and keep those passing both consistency checks.
    Filter(FilterArgs),
    /// Mask-area histogram and category counts of a manifest.
    Stats(StatsArgs),
    /// Write the high-frequency map of an image.
    ExtractHf(ExtractHfArgs),
    /// Split a diptych at its detected seam.
    SplitDiptych(SplitArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Generate the masked region for one image or a whole manifest.
    Infer(InferArgs),
    /// Score predictions against a manifest.
    Eval(EvalArgs),
    /// Compare taped gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Run the bundled spectral, attention and loss checks.
    Selftest,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Minimum embedding similarity.
    #[arg(long, default_value_t = 0.85)]
    sem_th: f64,
    /// Minimum label-text overlap.
    #[arg(long, default_value_t = 0.8)]
    txt_th: f64,
    /// Output manifest [default: filtered.jsonl next to the input].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON report [default: stats.json next to the manifest].
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Histogram chart [default: area_hist.pgm next to the manifest].
    #[arg(long)]
    out_pgm: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormalizeArg {
    None,
    Minmax,
}

#[derive(Args, Debug)]
struct ExtractHfArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    radius_frac: f64,
    #[arg(long, value_enum, default_value = "minmax")]
    normalize: NormalizeArg,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Receives product.ppm and scene.ppm.
    #[arg(long)]
    out_dir: PathBuf,
    /// Side of the square output panels.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_da: Option<f64>,
    #[arg(long)]
    radius_frac: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Disable the gated high-frequency branch.
    #[arg(long)]
    no_sea: bool,
    /// Disable the detail-aware loss term.
    #[arg(long)]
    no_dal: bool,
    /// Drop generator-produced records.
    #[arg(long)]
    no_synth: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    human: Option<PathBuf>,
    #[arg(long)]
    product: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Predict every record of this manifest instead of a single image.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Receives `<id>.ppm` per record with --manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory holding `<id>.ppm` predictions.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    radius_frac: f64,
    /// Also report histogram-embedding similarity.
    #[arg(long)]
    embed: bool,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 50)]
    params: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

fn configure_threads() {
    let n = std::env::var("HIFI_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        // a pool can only be installed once per process; ignore a repeat
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
