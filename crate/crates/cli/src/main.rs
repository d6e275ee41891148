//! `hearnet`: corpus synthesis, training, enhancement, classical
//! compensation, evaluation and loss-weight ablation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hearnet_core::Error;

#[derive(Debug, Parser)]
#[command(name = "hearnet", version, about = "Audiogram-conditioned speech enhancement and hearing-loss compensation")]
struct Cli {
    /// Single-threaded kernels and serial data loading, for byte-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a small synthetic speech/noise/audiogram source set.
    ToyPool(ToyPoolArgs),
    /// Synthesize a training corpus from speech, noise and audiogram sources.
    Synth(SynthArgs),
    /// Train the generator/discriminator pair on a synthesized corpus.
    Train(TrainArgs),
    /// Enhance and compensate one WAV with a trained model.
    Enhance(EnhanceArgs),
    /// Apply only the classical FIG6 compressor to one WAV.
    Fig6(Fig6Args),
    /// Score a model (or the unprocessed input) on a corpus.
    Eval(EvalArgs),
    /// Train one model per (alpha, lambda) cell and tabulate validation metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct ToyPoolArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub n_speech: usize,
    #[arg(long, default_value_t = 8)]
    pub n_noise: usize,
    #[arg(long, default_value_t = 16)]
    pub n_audiograms: usize,
    /// Length of every source item in seconds.
    #[arg(long, default_value_t = 6.0)]
    pub secs: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthesis config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of speech WAVs.
    #[arg(long)]
    pub speech: Option<PathBuf>,
    /// Directory of noise WAVs.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Audiogram file (JSON object/array or CSV rows).
    #[arg(long)]
    pub audiograms: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample duration in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus manifest.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation corpus manifest (defaults to the training corpus).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// C36DF4, C48DF4, C60DF4, C36DF8, C48DF8 or C60DF8.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: TrainOverrides,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub audiogram: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Refuse the checkpoint unless it holds this variant.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Fig6Args {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub audiogram: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model to evaluate; without it the noisy input is scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Quality oracle name.
    #[arg(long, default_value = "si_snr_proxy")]
    pub oracle: String,
    /// External metric as `name=program arg ...`; `{ref}`, `{est}` and
    /// `{audiogram}` are replaced by temporary file paths. Repeatable.
    #[arg(long = "metric")]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: TrainOverrides,
    /// Comma-separated adversarial weights.
    #[arg(long, value_delimiter = ',', required = true)]
    pub alphas: Vec<f64>,
    /// Comma-separated perceptual weights.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.deterministic {
        // read by both the rayon global pool and the tensor kernels
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let det = cli.deterministic;
    let res = match cli.command {
        Command::ToyPool(a) => commands::toy_pool(a),
        Command::Synth(a) => commands::synth(a, det),
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Fig6(a) => commands::fig6(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = if e.is_validation() { ("validation", 2) } else { ("runtime", 3) };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
