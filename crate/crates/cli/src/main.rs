//! `rdae` — reconstruction-error anomaly detection for video frames.
//!
//! Subcommands cover the full pipeline: `generate` renders a synthetic
//! labeled corpus, `train` fits the reconstruction model on normal frames,
//! `calibrate` turns the model's normal-frame errors into a threshold band,
//! `score` and `stream` apply model + band to new frames (batch CSV versus
//! live per-frame verdicts with latency accounting), and `evaluate` compares
//! verdicts against manifest labels.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "rdae",
    version,
    about = "Train a frame autoencoder on normal video and flag anomalies by reconstruction error"
)]
struct Cli {
    /// Seed overriding every seeded stage (scene rendering, model init,
    /// batch shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages: 1 forces the sequential
    /// path, any other value keeps the default pool size.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic corpus: train/ and test/ frame directories plus a
    /// manifest.csv labeling the test partition.
    Generate(GenerateArgs),
    /// Train the reconstruction model on a corpus's train/ partition.
    Train(TrainArgs),
    /// Score normal frames with a trained model and derive a threshold band.
    Calibrate(CalibrateArgs),
    /// Score a directory of frames; write an error-trace CSV and a summary.
    Score(ScoreArgs),
    /// Score frames one at a time in filename order, printing a verdict line
    /// per frame as it completes, then latency statistics.
    Stream(StreamArgs),
    /// Compare an error trace against manifest labels: metrics report,
    /// per-category recall, confusion matrix.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Scene description TOML (seed, size, tool_count, drift, illumination,
    /// grain). Defaults are used when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Run-configuration TOML; its [scene] section is the base when --spec
    /// is absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Normal frames rendered into train/.
    #[arg(long, default_value_t = 300)]
    pub normal_count: usize,
    /// Frames rendered into test/ (the scene continues past the train
    /// partition; anomalies are injected per --anomaly-plan).
    #[arg(long, default_value_t = 100)]
    pub test_count: usize,
    /// Anomaly segments inside the test partition, as
    /// "kind:start:len:intensity[,...]"; kinds are bleed, smoke, occlusion,
    /// blur, out_of_view. Empty means an all-normal test partition.
    #[arg(long, default_value = "")]
    pub anomaly_plan: String,
    /// Corpus output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Frame side length override.
    #[arg(long)]
    pub size: Option<usize>,
    /// Instrument count override.
    #[arg(long)]
    pub tool_count: Option<usize>,
    /// Scene motion rate override.
    #[arg(long)]
    pub drift: Option<f64>,
    /// Illumination gradient strength override.
    #[arg(long)]
    pub illumination: Option<f64>,
    /// Film-grain amplitude override.
    #[arg(long)]
    pub grain: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory holding a train/ partition.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run-configuration TOML ([model] and [train] sections apply).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint output path; holds the best epoch seen, rewritten whenever
    /// the mean reconstruction error improves.
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// History CSV path (default: <out-checkpoint>.history.csv).
    #[arg(long)]
    pub out_history: Option<PathBuf>,
    /// Frame side length; sets the model input and the training pipeline
    /// together.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Resolution levels in the encoder/decoder.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Comma-separated channel widths per level, e.g. "16,32,64".
    #[arg(long)]
    pub channels: Option<String>,
    /// Residual units per level.
    #[arg(long)]
    pub units_per_level: Option<usize>,
    /// Convolution kernel size (odd).
    #[arg(long)]
    pub filter_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// adam | sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Cap on frames scored for the per-epoch error average.
    #[arg(long)]
    pub eval_subsample: Option<usize>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of normal frames to score for the error distribution.
    #[arg(long)]
    pub normal_frames: PathBuf,
    /// "lower,upper" percentile pair, e.g. "1,99".
    #[arg(long)]
    pub percentiles: Option<String>,
    /// two-sided | upper-only
    #[arg(long)]
    pub mode: Option<String>,
    /// Run-configuration TOML ([calibration] section applies).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Band file output path.
    #[arg(long)]
    pub out_band: PathBuf,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Threshold band file from `calibrate`.
    #[arg(long)]
    pub band: PathBuf,
    /// Directory of frames to score in filename order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Error-trace CSV output: frame_index,rmse,verdict,bound.
    #[arg(long)]
    pub out_csv: PathBuf,
}

#[derive(Args)]
pub struct StreamArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Threshold band file from `calibrate`.
    #[arg(long)]
    pub band: PathBuf,
    /// Directory whose frames are processed in filename order.
    #[arg(long)]
    pub source_dir: PathBuf,
    /// Also write latency statistics to this TOML file.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Also append each verdict as a CSV row to this error-trace file.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Error-trace CSV from `score` or `stream`.
    #[arg(long)]
    pub scores_csv: PathBuf,
    /// Corpus manifest labeling the scored frames.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the per-category metric rows to this CSV.
    #[arg(long)]
    pub out_report: Option<PathBuf>,
    /// Also write the confusion matrix to this CSV.
    #[arg(long)]
    pub out_confusion: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };

    if let Some(threads) = cli.threads {
        if threads == 1 {
            rdae_core::exec::set_parallel(false);
        } else {
            // Honored by the worker pool if set before its first use.
            std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
        }
    }

    let outcome = match cli.command {
        Cmd::Generate(args) => commands::generate(args, cli.seed),
        Cmd::Train(args) => commands::train(args, cli.seed),
        Cmd::Calibrate(args) => commands::calibrate_cmd(args),
        Cmd::Score(args) => commands::score(args),
        Cmd::Stream(args) => commands::stream(args),
        Cmd::Evaluate(args) => commands::evaluate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
