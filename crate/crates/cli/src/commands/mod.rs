//! Command implementations and the file plumbing they share.

pub mod data;
pub mod decode;
pub mod diag;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use depthgrow_core::data::{encode_pairs, load_parallel_corpus, TokenizerMode};
use depthgrow_core::{Checkpoint, Float, Pair, Precision, Vocab};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Common;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_ECHO: &str = "config.toml";

/// Loads the config named by `common`, applies seed and determinism flags and validates.
pub fn prepare(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_seed(common.seed)?;
    if common.deterministic {
        cfg.run.deterministic = true;
    }
    cfg.train.deterministic = cfg.run.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

/// Refuses to replace an existing file unless `overwrite` is set.
pub fn guard(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(CliError::Clobber(path.to_path_buf()));
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>, overwrite: bool) -> Result<()> {
    guard(path, overwrite)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, contents).map_err(CliError::io(path))
}

/// `<file>.<suffix>` next to `file`.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    file.with_file_name(name)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect())
}

pub fn read_checkpoint<F: Float>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(Checkpoint::<f32>::read_manifest(&bytes)?.0.model.precision)
}

/// Runs a generic body at the precision named by the first argument.
macro_rules! at_precision {
    ($p:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $p {
            depthgrow_core::Precision::F32 => $f::<f32>($($arg),*),
            depthgrow_core::Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}
pub(crate) use at_precision;

/// Vocabulary of a checkpoint; checkpoints written by `train` always carry one.
pub fn checkpoint_vocab<F: Float>(ck: &Checkpoint<F>) -> Result<Vocab> {
    match &ck.vocab {
        Some(v) => Ok(v.clone()),
        None => Ok(Vocab::synthetic(ck.model.config().vocab_size)),
    }
}

pub fn corpus_dir(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| CliError::Config("no corpus directory: pass --data or set data.dir".into()))
}

/// Encoded `<name>.src`/`<name>.tgt` pairs from `dir`.
pub fn load_split(dir: &Path, name: &str, vocab: &Vocab, mode: TokenizerMode) -> Result<Vec<Pair>> {
    let lines = load_parallel_corpus(
        &dir.join(format!("{name}.src")),
        &dir.join(format!("{name}.tgt")),
    )?;
    Ok(encode_pairs(&lines, vocab, mode))
}

/// Training and validation pairs; an absent validation split yields no pairs.
pub fn load_train_valid(
    cfg: &RunConfig,
    dir: &Path,
    vocab: &Vocab,
) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let mode = cfg.data.tokenizer;
    let train = load_split(dir, "train", vocab, mode)?;
    let mut valid = if dir.join("valid.src").exists() {
        load_split(dir, "valid", vocab, mode)?
    } else {
        Vec::new()
    };
    if cfg.data.valid_limit > 0 {
        valid.truncate(cfg.data.valid_limit);
    }
    Ok((train, valid))
}

/// Applies `f` to every item on all available cores; results keep input order.
pub fn par_map<T, R, G>(items: &[T], f: G) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    G: Fn(usize, &T) -> Result<R> + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}
