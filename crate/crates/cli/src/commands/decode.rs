use std::fmt::Write as _;
use std::path::Path;

use depthgrow_core::data::{tokenize, TokenizerMode};
use depthgrow_core::decoding::{
    beam_search, deep_shallow_decode, score_sequence, Ensemble, NetView, SearchConfig,
};
use depthgrow_core::metrics::corpus_bleu;
use depthgrow_core::{Error, Float, View};

use super::{
    at_precision, checkpoint_precision, checkpoint_vocab, guard, par_map, prepare, read_checkpoint,
    read_lines, sibling, write_file,
};
use crate::config::RunConfig;
use crate::error::Result;
use crate::{Common, DecodeMode, ViewArg};

pub const RERANK_HEADER: &str = "line_id\tnetS_score\tnetD_score\trerank_score\tsource";
pub const SINGLE_HEADER: &str = "line_id\tscore";
pub const ENSEMBLE_HEADER: &str = "line_id\tscore_a\tscore_b\tensemble_score";

/// One decoded line and its sidecar row (without the line id).
struct Decoded {
    text: String,
    scores: String,
}

fn search_config(cfg: &mut RunConfig, beam: Option<usize>, max_len: Option<usize>) -> SearchConfig {
    if let Some(b) = beam {
        cfg.decode.beam = b;
    }
    if max_len.is_some() {
        cfg.decode.max_len = max_len;
    }
    cfg.decode.search()
}

fn write_outputs(
    out: &Path,
    sidecar: Option<(&Path, &str)>,
    rows: &[Decoded],
    overwrite: bool,
) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&r.text);
        text.push('\n');
    }
    write_file(out, text, overwrite)?;
    if let Some((path, header)) = sidecar {
        let mut tsv = format!("{header}\n");
        for (i, r) in rows.iter().enumerate() {
            writeln!(tsv, "{i}\t{}", r.scores).expect("string write");
        }
        write_file(path, tsv, overwrite)?;
    }
    Ok(())
}

fn encode_input(
    path: &Path,
    vocab: &depthgrow_core::Vocab,
    mode: TokenizerMode,
) -> Result<Vec<Vec<u32>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| vocab.encode_line(l, mode))
        .collect())
}

/// Decodes `input` line by line; rerank mode also writes the score sidecar.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    common: &Common,
    ckpt: &Path,
    input: &Path,
    out: &Path,
    mode: DecodeMode,
    beam: Option<usize>,
    max_len: Option<usize>,
    sidecar: Option<&Path>,
) -> Result<()> {
    let mut cfg = prepare(common)?;
    let search = search_config(&mut cfg, beam, max_len);
    cfg.validate()?;
    let sidecar = sidecar
        .map(Path::to_path_buf)
        .or_else(|| (mode == DecodeMode::Rerank).then(|| sibling(out, "scores.tsv")));
    guard(out, common.overwrite)?;
    if let Some(p) = &sidecar {
        guard(p, common.overwrite)?;
    }
    at_precision!(
        checkpoint_precision(ckpt)?,
        decode_at(
            &cfg,
            &search,
            ckpt,
            input,
            out,
            mode,
            sidecar.as_deref(),
            common.overwrite
        )
    )
}

#[allow(clippy::too_many_arguments)]
fn decode_at<F: Float>(
    cfg: &RunConfig,
    search: &SearchConfig,
    ckpt: &Path,
    input: &Path,
    out: &Path,
    mode: DecodeMode,
    sidecar: Option<&Path>,
    overwrite: bool,
) -> Result<()> {
    let ck = read_checkpoint::<F>(ckpt)?;
    let vocab = checkpoint_vocab(&ck)?;
    let srcs = encode_input(input, &vocab, ck.tokenizer)?;
    let model = &ck.model;
    let rows = match mode {
        DecodeMode::Shallow | DecodeMode::Deep => {
            let view = if mode == DecodeMode::Deep {
                View::Deep
            } else {
                View::Shallow
            };
            let net = NetView::new(model, view)?;
            par_map(&srcs, |_, src| {
                if src.is_empty() {
                    return Ok(Decoded {
                        text: String::new(),
                        scores: String::new(),
                    });
                }
                let best = beam_search(&net, src, search)?.swap_remove(0);
                Ok(Decoded {
                    text: vocab.decode_line(best.targets(), ck.tokenizer),
                    scores: format!("{:.6}", best.logprob),
                })
            })?
        }
        DecodeMode::Rerank => {
            let shallow = NetView::new(model, View::Shallow)?;
            let deep = NetView::new(model, View::Deep)?;
            let rerank = cfg.decode.rerank();
            par_map(&srcs, |_, src| {
                if src.is_empty() {
                    return Ok(Decoded {
                        text: String::new(),
                        scores: String::new(),
                    });
                }
                let c = deep_shallow_decode(&shallow, &deep, src, search, &rerank)?.chosen;
                Ok(Decoded {
                    text: vocab.decode_line(&c.tokens, ck.tokenizer),
                    scores: format!(
                        "{:.6}\t{:.6}\t{:.6}\t{}",
                        c.score_shallow,
                        c.score_deep,
                        c.rerank,
                        c.source.label()
                    ),
                })
            })?
        }
    };
    let header = if mode == DecodeMode::Rerank {
        super::decode::RERANK_HEADER
    } else {
        SINGLE_HEADER
    };
    write_outputs(out, sidecar.map(|p| (p, header)), &rows, overwrite)?;
    println!("decoded {} lines into {}", rows.len(), out.display());
    Ok(())
}

/// Two-checkpoint ensemble decoding; the sidecar defaults to `<out>.scores.tsv`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_decode(
    common: &Common,
    ckpts: [&Path; 2],
    input: &Path,
    out: &Path,
    view: Option<ViewArg>,
    beam: Option<usize>,
    max_len: Option<usize>,
    sidecar: Option<&Path>,
) -> Result<()> {
    let mut cfg = prepare(common)?;
    let search = search_config(&mut cfg, beam, max_len);
    cfg.validate()?;
    let sidecar = sidecar
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(out, "scores.tsv"));
    guard(out, common.overwrite)?;
    guard(&sidecar, common.overwrite)?;
    at_precision!(
        checkpoint_precision(ckpts[0])?,
        ensemble_at(&search, ckpts, input, out, view, &sidecar, common.overwrite)
    )
}

fn ensemble_at<F: Float>(
    search: &SearchConfig,
    ckpts: [&Path; 2],
    input: &Path,
    out: &Path,
    view: Option<ViewArg>,
    sidecar: &Path,
    overwrite: bool,
) -> Result<()> {
    let a = read_checkpoint::<F>(ckpts[0])?;
    let b = read_checkpoint::<F>(ckpts[1])?;
    let vocab = checkpoint_vocab(&a)?;
    if checkpoint_vocab(&b)? != vocab {
        return Err(Error::Config("ensemble members use different vocabularies".into()).into());
    }
    let pick = |m: &depthgrow_core::DepthGrowModel<F>| match view {
        Some(ViewArg::Shallow) => View::Shallow,
        Some(ViewArg::Deep) => View::Deep,
        None => m.default_view(),
    };
    let na = NetView::new(&a.model, pick(&a.model))?;
    let nb = NetView::new(&b.model, pick(&b.model))?;
    let ens = Ensemble { a: na, b: nb };
    let srcs = encode_input(input, &vocab, a.tokenizer)?;
    let rows = par_map(&srcs, |_, src| {
        if src.is_empty() {
            return Ok(Decoded {
                text: String::new(),
                scores: String::new(),
            });
        }
        let best = beam_search(&ens, src, search)?.swap_remove(0);
        let t = best.targets();
        Ok(Decoded {
            text: vocab.decode_line(t, a.tokenizer),
            scores: format!(
                "{:.6}\t{:.6}\t{:.6}",
                score_sequence(&na, src, t)?,
                score_sequence(&nb, src, t)?,
                best.logprob
            ),
        })
    })?;
    write_outputs(out, Some((sidecar, ENSEMBLE_HEADER)), &rows, overwrite)?;
    println!("decoded {} lines into {}", rows.len(), out.display());
    Ok(())
}

/// Prints corpus BLEU of `hyp` against `reference`.
pub fn eval_bleu(hyp: &Path, reference: &Path, chars: bool) -> Result<()> {
    let mode = if chars {
        TokenizerMode::Char
    } else {
        TokenizerMode::Whitespace
    };
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    if h.len() != r.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        ))
        .into());
    }
    let tok = |v: &[String]| v.iter().map(|l| tokenize(l, mode)).collect::<Vec<_>>();
    println!("{}", corpus_bleu(&tok(&h), &tok(&r))?);
    Ok(())
}
