//! `depthgrow` command-line driver: data generation, two-stage training,
//! growing, decoding, evaluation and diagnostics over checkpoint files.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "depthgrow",
    version,
    about = "Depth-growing encoder-decoder Transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Master seed; falls back to the config file, then DEPTHGROW_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Force bit-reproducible batching and outputs.
    #[arg(long)]
    pub deterministic: bool,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeMode {
    Shallow,
    Deep,
    Rerank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    Shallow,
    Deep,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic parallel corpus (train/valid/test splits and vocabulary).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["copy", "reverse", "sort", "noisy-copy"])]
        task: Option<String>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        p_noise: Option<f64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_valid: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Stage 1: train the shallow model end to end.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (overrides `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Freeze a shallow checkpoint and stack a fresh top module on it.
    Grow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blocks per stack in the top module.
        #[arg(long)]
        top_blocks: Option<usize>,
    },
    /// Stage 2: train only the top module of a grown checkpoint.
    TrainTop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Beam-decode a source file with one view or deep-shallow reranking.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DecodeMode::Rerank)]
        mode: DecodeMode,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Score sidecar path (rerank mode; default `<out>.scores.tsv`).
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Tokenize by characters instead of whitespace.
        #[arg(long)]
        chars: bool,
    },
    /// Finite-difference check of a tiny 64-bit grown model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_params: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Train models of several depths and write validation metrics as CSV.
    SweepDepth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Total blocks per stack, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2,4,6")]
        depths: Vec<usize>,
        /// Also run direct stacking on a trained half-depth model and the grown model.
        #[arg(long)]
        grow: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Beam-decode with the average log-probabilities of two checkpoints.
    EnsembleDecode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// View used for both members; defaults to deep for grown checkpoints.
        #[arg(long, value_enum)]
        view: Option<ViewArg>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Verify that no frozen parameter changed since grow time.
    FreezeAudit {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    use commands::*;
    match cli.command {
        Command::GenData {
            common,
            out,
            task,
            vocab_size,
            p_noise,
            n_train,
            n_valid,
            n_test,
        } => data::gen_data(
            &common,
            &out,
            data::GenOverrides {
                task,
                vocab_size,
                p_noise,
                n_train,
                n_valid,
                n_test,
            },
        ),
        Command::Train {
            common,
            data,
            out,
            resume,
            max_steps,
        } => train::train(&common, data.as_deref(), &out, resume.as_deref(), max_steps),
        Command::Grow {
            common,
            ckpt,
            out,
            top_blocks,
        } => train::grow(&common, &ckpt, &out, top_blocks),
        Command::TrainTop {
            common,
            ckpt,
            data,
            out,
            max_steps,
        } => train::train_top(&common, &ckpt, data.as_deref(), &out, max_steps),
        Command::Decode {
            common,
            ckpt,
            input,
            out,
            mode,
            beam,
            max_len,
            sidecar,
        } => decode::decode(
            &common,
            &ckpt,
            &input,
            &out,
            mode,
            beam,
            max_len,
            sidecar.as_deref(),
        ),
        Command::EvalBleu {
            hyp,
            reference,
            chars,
        } => decode::eval_bleu(&hyp, &reference, chars),
        Command::Gradcheck {
            common,
            n_params,
            tolerance,
        } => diag::gradcheck(&common, n_params, tolerance),
        Command::SweepDepth {
            common,
            data,
            depths,
            grow,
            out,
            max_steps,
        } => diag::sweep_depth(&common, data.as_deref(), &depths, grow, &out, max_steps),
        Command::EnsembleDecode {
            common,
            ckpt_a,
            ckpt_b,
            input,
            out,
            view,
            beam,
            max_len,
            sidecar,
        } => decode::ensemble_decode(
            &common,
            [&ckpt_a, &ckpt_b],
            &input,
            &out,
            view,
            beam,
            max_len,
            sidecar.as_deref(),
        ),
        Command::FreezeAudit { ckpt } => train::freeze_audit(&ckpt),
    }
}
