//! `modvlad` command-line entry point.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "modvlad", version, about = "Train, localize and evaluate NeXtVLAD mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the training commands. Precedence, lowest
/// first: preset, `--config` file, `--set` overrides, dedicated flags.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Preset for training and model shapes: tiny, desk or full.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame-feature corpus with segment labels.
    GenData {
        /// Corpus spec file (key=value).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Corpus preset when no spec file is given: tiny, desk or full.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single model or a mixture on whole-video labels.
    Pretrain {
        /// Corpus file with video-level labels.
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Mixture shape: single, 3, 4x3, ...
        #[arg(long)]
        tree: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a checkpoint on labeled five-frame segments.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file holding the videos the segment labels refer to.
        #[arg(long)]
        corpus: PathBuf,
        /// Segment label CSV.
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank segments per class with the candidate, scoring and fusion phases.
    Localize {
        /// Checkpoint used for video-level candidates.
        #[arg(long)]
        video_model: PathBuf,
        /// Checkpoint used to score segments.
        #[arg(long, required_unless_present = "dummy", conflicts_with = "dummy")]
        segment_model: Option<PathBuf>,
        /// Score segments with the video-level probabilities instead.
        #[arg(long)]
        dummy: bool,
        #[arg(long)]
        corpus: PathBuf,
        /// Ground-truth segment labels, used only for the recall diagnostic.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        candidates: usize,
        #[arg(long, default_value_t = 10_000)]
        top_k: usize,
        #[arg(long, default_value_t = 5)]
        stride: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute MAP@K of a prediction CSV against segment labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = modvlad::evaluation::DEFAULT_MAP_K)]
        k: usize,
        /// Number of classes; defaults to one past the largest class id seen.
        #[arg(long)]
        class_count: Option<u32>,
        /// Training diagnostics CSV whose distillation losses get plotted.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint summary.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOD_LOG_LEVEL", "info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            spec,
            preset,
            overrides,
            seed,
            out,
        } => commands::gen_data(spec, preset, &overrides, seed, &out),
        Command::Pretrain {
            corpus,
            cfg,
            tree,
            temperature,
            out,
        } => commands::pretrain(&corpus, &cfg, tree, temperature, &out),
        Command::Finetune {
            checkpoint,
            corpus,
            labels,
            cfg,
            temperature,
            out,
        } => commands::finetune(&checkpoint, &corpus, &labels, &cfg, temperature, &out),
        Command::Localize {
            video_model,
            segment_model,
            dummy: _,
            corpus,
            labels,
            candidates,
            top_k,
            stride,
            workers,
            out,
        } => commands::localize(
            &video_model,
            segment_model.as_deref(),
            &corpus,
            labels.as_deref(),
            modvlad::localization::LocalizeConfig {
                candidates,
                top_k,
                stride,
                workers,
                ..Default::default()
            },
            &out,
        ),
        Command::Evaluate {
            predictions,
            labels,
            k,
            class_count,
            plot,
            out,
        } => commands::evaluate(&predictions, &labels, k, class_count, plot.as_deref(), &out),
        Command::Gradcheck { preset, seeds, out } => commands::gradcheck(&preset, seeds, out.as_deref()),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<modvlad::Error>())
                .map_or("other", |m| m.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error kind={kind} msg={msg}");
            ExitCode::FAILURE
        }
    }
}
