use std::path::{Path, PathBuf};

use depthgrow_core::data::TokenizerMode;
use depthgrow_core::training::{
    train_stage1, train_stage2, Adam, LogRow, TrainObserver, LOG_HEADER,
};
use depthgrow_core::{Checkpoint, DepthGrowModel, Error, Float, Vocab};

use super::data::resolve_vocab;
use super::{
    at_precision, checkpoint_precision, checkpoint_vocab, corpus_dir, guard, load_train_valid,
    prepare, read_checkpoint, sibling, write_file, CONFIG_ECHO,
};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Common;

pub const FINAL_CHECKPOINT: &str = "checkpoint.dgnm";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Streams the CSV log and writes intermediate checkpoints into `dir`.
struct FileObserver<'a> {
    dir: &'a Path,
    overwrite: bool,
    vocab: &'a Vocab,
    tokenizer: TokenizerMode,
    final_step: u64,
    log: String,
}

impl<'a> FileObserver<'a> {
    fn new(
        dir: &'a Path,
        overwrite: bool,
        vocab: &'a Vocab,
        tokenizer: TokenizerMode,
        final_step: u64,
    ) -> Self {
        FileObserver {
            dir,
            overwrite,
            vocab,
            tokenizer,
            final_step,
            log: format!("{LOG_HEADER}\n"),
        }
    }

    fn flush(&self) -> Result<()> {
        // the log was guarded before training started
        write_file(&self.dir.join(TRAIN_LOG), &self.log, true)
    }
}

fn core_err(e: CliError) -> Error {
    match e {
        CliError::Core(e) => e,
        CliError::Io { source, .. } => Error::Io(source),
        other => Error::Config(other.to_string()),
    }
}

impl<F: Float> TrainObserver<F> for FileObserver<'_> {
    fn on_log(&mut self, row: &LogRow) -> depthgrow_core::Result<()> {
        self.log.push_str(&row.to_csv());
        self.log.push('\n');
        eprintln!(
            "stage {} step {:>6}  lr {:.2e}  train {:.4}{}",
            row.stage,
            row.step,
            row.lr,
            row.train_loss,
            row.valid_loss
                .zip(row.valid_acc)
                .map_or(String::new(), |(l, a)| format!("  valid {l:.4} acc {a:.4}"))
        );
        self.flush().map_err(core_err)
    }

    fn on_checkpoint(
        &mut self,
        model: &DepthGrowModel<F>,
        adam: &Adam<F>,
    ) -> depthgrow_core::Result<()> {
        if model.step == self.final_step {
            return Ok(());
        }
        let ck = Checkpoint::new(model.clone())
            .with_adam(adam.clone())
            .with_vocab(self.vocab.clone(), self.tokenizer);
        let path = self.dir.join(format!("step_{}.dgnm", model.step));
        write_file(&path, ck.to_bytes(), self.overwrite).map_err(core_err)
    }
}

fn save_final<F: Float>(
    dir: &Path,
    model: DepthGrowModel<F>,
    adam: Adam<F>,
    vocab: Vocab,
    tokenizer: TokenizerMode,
) -> Result<PathBuf> {
    let path = dir.join(FINAL_CHECKPOINT);
    let ck = Checkpoint::new(model)
        .with_adam(adam)
        .with_vocab(vocab, tokenizer);
    write_file(&path, ck.to_bytes(), true)?;
    Ok(path)
}

fn guard_outputs(out: &Path, overwrite: bool) -> Result<()> {
    for name in [FINAL_CHECKPOINT, TRAIN_LOG, CONFIG_ECHO] {
        guard(&out.join(name), overwrite)?;
    }
    Ok(())
}

/// Stage-1 training; writes `checkpoint.dgnm`, `train_log.csv` and `config.toml` into `out`.
pub fn train(
    common: &Common,
    data: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    max_steps: Option<u64>,
) -> Result<()> {
    let mut cfg = prepare(common)?;
    if let Some(s) = max_steps {
        cfg.train.max_steps = s;
    }
    let dir = corpus_dir(&cfg, data)?;
    guard_outputs(out, common.overwrite)?;
    match resume {
        Some(path) => at_precision!(
            checkpoint_precision(path)?,
            resume_at(&cfg, &dir, out, path, common.overwrite)
        ),
        None => at_precision!(
            cfg.model.precision,
            train_at(cfg, &dir, out, common.overwrite)
        ),
    }
}

fn train_at<F: Float>(mut cfg: RunConfig, dir: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let vocab = resolve_vocab(&mut cfg, dir)?;
    let (train, valid) = load_train_valid(&cfg, dir, &vocab)?;
    let model = DepthGrowModel::<F>::new_shallow(&cfg.model, cfg.seed())?;
    run_stage(cfg, model, None, &train, &valid, vocab, out, overwrite)
}

fn resume_at<F: Float>(
    cfg: &RunConfig,
    dir: &Path,
    out: &Path,
    path: &Path,
    overwrite: bool,
) -> Result<()> {
    let ck = read_checkpoint::<F>(path)?;
    if ck.model.is_grown() {
        return Err(CliError::Config(format!(
            "{} is a grown checkpoint; continue it with `train-top`",
            path.display()
        )));
    }
    let vocab = checkpoint_vocab(&ck)?;
    let mut cfg = cfg.clone();
    cfg.model = ck.model.config().clone();
    cfg.data.tokenizer = ck.tokenizer;
    let (train, valid) = load_train_valid(&cfg, dir, &vocab)?;
    run_stage(
        cfg, ck.model, ck.adam, &train, &valid, vocab, out, overwrite,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_stage<F: Float>(
    mut cfg: RunConfig,
    mut model: DepthGrowModel<F>,
    adam: Option<Adam<F>>,
    train: &[depthgrow_core::Pair],
    valid: &[depthgrow_core::Pair],
    vocab: Vocab,
    out: &Path,
    overwrite: bool,
) -> Result<()> {
    let grown = model.is_grown();
    let mut tcfg = cfg.train.clone();
    if grown {
        tcfg.max_steps = cfg.grow.max_steps.unwrap_or(tcfg.max_steps);
        cfg.grow.max_steps = Some(tcfg.max_steps);
    }
    write_file(&out.join(CONFIG_ECHO), cfg.to_toml(), overwrite)?;
    let tokenizer = cfg.data.tokenizer;
    let mut obs = FileObserver::new(out, overwrite, &vocab, tokenizer, tcfg.max_steps);
    obs.flush()?;
    let outcome = if grown {
        train_stage2(&mut model, adam, train, valid, &tcfg, &mut obs)?
    } else {
        train_stage1(&mut model, adam, train, valid, &tcfg, &mut obs)?
    };
    if grown {
        let report = model.freeze_audit();
        println!(
            "freeze audit clean: {} frozen, {} trainable parameters",
            report.frozen.len(),
            report.trainable.len()
        );
    }
    let path = save_final(out, model, outcome.adam, vocab, tokenizer)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Grows a shallow checkpoint into `out`.
///
/// With `--config`, the file's model dimensions must match the checkpoint.
pub fn grow(common: &Common, ckpt: &Path, out: &Path, top_blocks: Option<usize>) -> Result<()> {
    let cfg = prepare(common)?;
    guard(out, common.overwrite)?;
    at_precision!(
        checkpoint_precision(ckpt)?,
        grow_at(
            &cfg,
            common.config.is_some(),
            ckpt,
            out,
            top_blocks,
            common.overwrite
        )
    )
}

fn grow_at<F: Float>(
    cfg: &RunConfig,
    check_dims: bool,
    ckpt: &Path,
    out: &Path,
    top_blocks: Option<usize>,
    overwrite: bool,
) -> Result<()> {
    let ck = read_checkpoint::<F>(ckpt)?;
    let have = ck.model.config().clone();
    if check_dims {
        let want = &cfg.model;
        let dims =
            |c: &depthgrow_core::ModelConfig| (c.d_model, c.d_ff, c.n_heads, c.n_bottom_blocks);
        if dims(want) != dims(&have) {
            return Err(CliError::Config(format!(
                "checkpoint has (d_model, d_ff, n_heads, n_bottom_blocks) = {:?}, config asks for {:?}",
                dims(&have),
                dims(want)
            )));
        }
    }
    let m = top_blocks
        .or(check_dims.then_some(cfg.model.n_top_blocks))
        .unwrap_or(have.n_top_blocks);
    let before = ck.model.store().numel();
    let grown = ck
        .model
        .grow(m, cfg.seed().wrapping_add(1), cfg.grow.options())?;
    let added = grown.store().numel() - before;
    let mut echo = cfg.clone();
    echo.model = grown.config().clone();
    let mut out_ck = Checkpoint::new(grown);
    if let Some(v) = ck.vocab {
        out_ck = out_ck.with_vocab(v, ck.tokenizer);
    }
    write_file(out, out_ck.to_bytes(), overwrite)?;
    write_file(&sibling(out, CONFIG_ECHO), echo.to_toml(), overwrite)?;
    println!(
        "grew {m} top block(s) per stack, {added} new trainable parameters; wrote {}",
        out.display()
    );
    Ok(())
}

/// Stage-2 training of a grown checkpoint; the freeze audit runs at every checkpoint.
pub fn train_top(
    common: &Common,
    ckpt: &Path,
    data: Option<&Path>,
    out: &Path,
    max_steps: Option<u64>,
) -> Result<()> {
    let mut cfg = prepare(common)?;
    if let Some(s) = max_steps {
        cfg.grow.max_steps = Some(s);
    }
    let dir = corpus_dir(&cfg, data)?;
    guard_outputs(out, common.overwrite)?;
    at_precision!(
        checkpoint_precision(ckpt)?,
        train_top_at(cfg, &dir, ckpt, out, common.overwrite)
    )
}

fn train_top_at<F: Float>(
    mut cfg: RunConfig,
    dir: &Path,
    ckpt: &Path,
    out: &Path,
    overwrite: bool,
) -> Result<()> {
    let ck = read_checkpoint::<F>(ckpt)?;
    if !ck.model.is_grown() {
        return Err(CliError::Config(format!(
            "{} is not a grown checkpoint; run `grow` first",
            ckpt.display()
        )));
    }
    let vocab = checkpoint_vocab(&ck)?;
    cfg.model = ck.model.config().clone();
    cfg.data.tokenizer = ck.tokenizer;
    let (train, valid) = load_train_valid(&cfg, dir, &vocab)?;
    run_stage(
        cfg, ck.model, ck.adam, &train, &valid, vocab, out, overwrite,
    )
}

/// Exits with the freeze-violation status when any frozen parameter changed.
pub fn freeze_audit(ckpt: &Path) -> Result<()> {
    at_precision!(checkpoint_precision(ckpt)?, audit_at(ckpt))
}

fn audit_at<F: Float>(ckpt: &Path) -> Result<()> {
    let ck = read_checkpoint::<F>(ckpt)?;
    let report = ck.model.freeze_audit();
    println!(
        "{} frozen, {} trainable, {} violations",
        report.frozen.len(),
        report.trainable.len(),
        report.violations.len()
    );
    if report.is_clean() {
        Ok(())
    } else {
        for name in &report.violations {
            println!("changed: {name}");
        }
        Err(Error::FreezeViolation(report.violations).into())
    }
}
