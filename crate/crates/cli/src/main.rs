//! `duiit`: synthesize data, train methods, translate, evaluate and compare.

mod compare;
mod config;
mod error;
mod evaluate;
mod synth;
mod train;
mod translate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duiit_core::baselines::ModelPreset;
use duiit_core::engine::Method;

use crate::config::Overrides;
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "duiit", version, about = "Cross-modality augmentation by discriminative image translation")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-modality task to disk.
    Synth(SynthCmd),
    /// Train a method over several random splits.
    Train(TrainCmd),
    /// Translate a modality with a checkpoint's generator.
    Translate(TranslateCmd),
    /// Score a checkpoint's predictor (and translator) on a dataset.
    Evaluate(EvaluateCmd),
    /// Tabulate reports sorted by mean test MSE.
    Compare(CompareCmd),
    #[command(hide = true)]
    Worker(WorkerCmd),
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_source: usize,
    #[arg(long, default_value_t = 700)]
    n_target: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    #[arg(long)]
    no_clobber: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: duiit_core::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<ModelPreset, String> {
    match s {
        "desk" => Ok(ModelPreset::Desk),
        "full" => Ok(ModelPreset::Full),
        other => Err(format!("unknown preset `{other}` (desk, full)")),
    }
}

#[derive(Args)]
struct TrainCmd {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ours, tl, mtl, dann, cyclegan, simple-aug, random-erasing or pure.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Dataset root with one directory per modality.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Network sizes: desk or full.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<ModelPreset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    decay_start: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    lr_translator: Option<f64>,
    #[arg(long)]
    lr_predictor: Option<f64>,
    #[arg(long)]
    n_runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run root; beats DUIIT_RUNS_DIR and the config file.
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Worker processes for the runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Refuse to overwrite an existing report.
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Args)]
struct TranslateCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding the modality to translate.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "source")]
    modality: String,
    #[arg(long)]
    out: PathBuf,
    /// Modality name written for the translated images.
    #[arg(long, default_value = "target")]
    target_modality: String,
    /// Also write a PNG of (input, output) pairs here.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    grid_rows: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "target")]
    modality: String,
    /// Also score translations of this modality with IS and FID.
    #[arg(long)]
    source_modality: Option<String>,
    #[arg(long, default_value_t = 1000)]
    max_samples: usize,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareCmd {
    /// report.json files.
    reports: Vec<PathBuf>,
    /// Write the CSV here instead of after the table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerCmd {
    #[arg(long)]
    experiment_dir: PathBuf,
    #[arg(long)]
    index: usize,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(c) => synth::cmd_synth(&synth::SynthArgs {
            out: c.out,
            n_source: c.n_source,
            n_target: c.n_target,
            resolution: c.resolution,
            seed: c.seed,
            noise_std: c.noise_std,
            distractors: c.distractors,
            no_clobber: c.no_clobber,
        }),
        Command::Train(c) => train::cmd_train(&train::TrainArgs {
            config: c.config,
            overrides: Overrides {
                method: c.method,
                data: c.data,
                preset: c.preset,
                epochs: c.epochs,
                decay_start: c.decay_start,
                batch_size: c.batch_size,
                lambda: c.lambda,
                lr_translator: c.lr_translator,
                lr_predictor: c.lr_predictor,
                n_runs: c.n_runs,
                seed: c.seed,
            },
            runs_dir: c.runs_dir,
            jobs: c.jobs,
            no_clobber: c.no_clobber,
        })
        .map(|_| ()),
        Command::Translate(c) => translate::cmd_translate(&translate::TranslateArgs {
            checkpoint: c.checkpoint,
            input: c.input,
            modality: c.modality,
            out: c.out,
            target_modality: c.target_modality,
            grid: c.grid,
            grid_rows: c.grid_rows,
            batch_size: c.batch_size,
            no_clobber: c.no_clobber,
        }),
        Command::Evaluate(c) => evaluate::cmd_evaluate(&evaluate::EvaluateArgs {
            checkpoint: c.checkpoint,
            data: c.data,
            modality: c.modality,
            source_modality: c.source_modality,
            max_samples: c.max_samples,
            out: c.out,
        }),
        Command::Compare(c) => compare::cmd_compare(&c.reports, c.csv.as_ref()),
        Command::Worker(c) => train::cmd_worker(&c.experiment_dir, c.index),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
