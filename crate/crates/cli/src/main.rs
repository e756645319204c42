//! `msfft` command-line front end.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msfft::config::Precision;

#[derive(Parser, Debug)]
#[command(name = "msfft", version, about = "Time-domain speech separation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise a mixture dataset and its manifest.
    SynthData(SynthArgs),
    /// Train a separator; writes a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest (SI-SNRi / SDRi table).
    Eval(EvalArgs),
    /// Separate a mixture WAV into one WAV per source.
    Separate(SeparateArgs),
    /// Train several variants side by side at matched parameter counts.
    Bench(BenchArgs),
    /// Render a spectrogram of a WAV or a loss curve of a metrics log.
    Plot(PlotArgs),
    /// Print the effective configuration.
    ShowConfig(ConfigArgs),
}

/// Where the run configuration comes from. Flags override file values.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Named preset (msfft2p-paper, msfft3p-paper, msfft2p-tiny, msfft3p-tiny,
    /// dprnn-msff2p, dprnn-msff3p).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; the manifest is written as `<split>.jsonl` inside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of mixtures.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Sources per mixture.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub sources: u8,
    /// Mixing SNR range in dB (low high).
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], default_values_t = [-5.0, 5.0], allow_negative_numbers = true)]
    pub snr: Vec<f64>,
    /// Source duration range in seconds (low high).
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], default_values_t = [1.0, 1.0])]
    pub duration: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
    /// train, valid or test.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// speechlike, tone or noise.
    #[arg(long, default_value = "speechlike")]
    pub kind: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory (config.echo, metrics.log, checkpoints/, tables/, plots/).
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub valid_manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Stop after this many optimiser steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Expected configuration; evaluation is refused if it differs from the checkpoint's.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for eval.tsv and eval.json (default: `tables/` beside the checkpoint's run).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mixture WAV; outputs are written as `<stem>.sep<c>.wav`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory (default: beside the input).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Variants to compare: msfft2p, msfft2p-sum, msfft3p, single-path,
    /// recurrent-2p, recurrent-3p, or any preset name.
    #[arg(long = "variant", required = true, num_args = 1.., value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Preset the derived variants start from.
    #[arg(long, default_value = "msfft2p-tiny")]
    pub base: String,
    /// Training manifest; a fixed synthetic set is generated when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub duration: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for bench.tsv and bench.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// WAV files to render as spectrograms.
    #[arg(long = "wav")]
    pub wavs: Vec<PathBuf>,
    /// Metrics log to render as a loss curve.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Output directory for the PNG files.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("precision must be f32 or f64, got {other}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Separate(a) => commands::separate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Plot(a) => commands::plot(a),
        Command::ShowConfig(a) => commands::show_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
