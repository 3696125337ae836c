use std::path::Path;

use depthgrow_core::data::{build_vocab, gen_synthetic, load_parallel_corpus, tokenize, TaskKind};
use depthgrow_core::{Pair, Vocab};

use super::{prepare, write_file, CONFIG_ECHO, VOCAB_FILE};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Common;

#[derive(Clone, Debug, Default)]
pub struct GenOverrides {
    pub task: Option<String>,
    pub vocab_size: Option<usize>,
    pub p_noise: Option<f64>,
    pub n_train: Option<usize>,
    pub n_valid: Option<usize>,
    pub n_test: Option<usize>,
}

fn parse_task(name: &str) -> Result<TaskKind> {
    Ok(match name {
        "copy" => TaskKind::Copy,
        "reverse" => TaskKind::Reverse,
        "sort" => TaskKind::Sort,
        "noisy-copy" => TaskKind::NoisyCopy,
        other => return Err(CliError::Config(format!("unknown task `{other}`"))),
    })
}

fn lines(pairs: &[Pair], vocab: &Vocab) -> (String, String) {
    let join = |ids: &[u32]| vocab.decode(ids).join(" ");
    let mut src = String::new();
    let mut tgt = String::new();
    for p in pairs {
        src.push_str(&join(&p.src));
        src.push('\n');
        tgt.push_str(&join(&p.tgt));
        tgt.push('\n');
    }
    (src, tgt)
}

/// Writes `{train,valid,test}.{src,tgt}`, `vocab.txt` and a config echo to `out`.
///
/// The data seed is `data.synthetic.seed`, replaced by `--seed` when given.
pub fn gen_data(common: &Common, out: &Path, o: GenOverrides) -> Result<()> {
    let mut cfg = prepare(&Common {
        seed: None,
        ..common.clone()
    })?;
    let d = &mut cfg.data;
    if let Some(t) = &o.task {
        d.synthetic.kind = parse_task(t)?;
    }
    if let Some(s) = common.seed {
        d.synthetic.seed = s;
    }
    d.synthetic.vocab_size = o.vocab_size.unwrap_or(d.synthetic.vocab_size);
    d.synthetic.p_noise = o.p_noise.unwrap_or(d.synthetic.p_noise);
    d.n_train = o.n_train.unwrap_or(d.n_train);
    d.n_valid = o.n_valid.unwrap_or(d.n_valid);
    d.n_test = o.n_test.unwrap_or(d.n_test);
    d.synthetic.validate()?;
    if d.n_train == 0 {
        return Err(CliError::Config("n_train must be positive".into()));
    }

    let vocab = Vocab::synthetic(d.synthetic.vocab_size);
    let pairs = gen_synthetic(&d.synthetic, d.n_train + d.n_valid + d.n_test)?;
    let (train, rest) = pairs.split_at(d.n_train);
    let (valid, test) = rest.split_at(d.n_valid);
    let mut files = vec![(VOCAB_FILE.to_string(), vocab.to_file_string())];
    for (name, split) in [("train", train), ("valid", valid), ("test", test)] {
        if split.is_empty() {
            continue;
        }
        let (s, t) = lines(split, &vocab);
        files.push((format!("{name}.src"), s));
        files.push((format!("{name}.tgt"), t));
    }
    files.push((CONFIG_ECHO.to_string(), cfg.to_toml()));
    for (name, _) in &files {
        super::guard(&out.join(name), common.overwrite)?;
    }
    for (name, body) in files {
        write_file(&out.join(name), body, common.overwrite)?;
    }
    println!(
        "wrote {} train, {} valid, {} test pairs to {}",
        train.len(),
        valid.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

/// The corpus vocabulary: `vocab.txt` when present, otherwise built from the
/// training split with at most `model.vocab_size` ids. The result sets
/// `cfg.model.vocab_size`.
pub fn resolve_vocab(cfg: &mut RunConfig, dir: &Path) -> Result<Vocab> {
    let file = dir.join(VOCAB_FILE);
    let vocab = if file.exists() {
        Vocab::load(&file)?
    } else {
        let lines = load_parallel_corpus(&dir.join("train.src"), &dir.join("train.tgt"))?;
        let toks: Vec<Vec<String>> = lines
            .iter()
            .flat_map(|(s, t)| {
                [
                    tokenize(s, cfg.data.tokenizer),
                    tokenize(t, cfg.data.tokenizer),
                ]
            })
            .collect();
        build_vocab(toks.iter().map(Vec::as_slice), cfg.model.vocab_size, 1)
    };
    cfg.model.vocab_size = vocab.len();
    Ok(vocab)
}
