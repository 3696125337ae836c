//! Greedy and beam search over any next-token model, teacher-forced scoring,
//! deep-shallow pooled reranking and a two-model ensemble.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Mode, Tape};
use crate::data::{BOS, EOS, NUM_RESERVED, PAD, UNK};
use crate::error::{Error, Result};
use crate::growth::{DepthGrowModel, Encoded, Regime, View};
use crate::tensor::{Float, Tensor};
use crate::transformer::SeqLayout;

pub const DEFAULT_BEAM: usize = 5;

/// `2·|src| + 8`.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 8
}

/// Anything that yields next-token log-probabilities for a batch of prefixes.
pub trait SequenceModel {
    type State;

    fn vocab_size(&self) -> usize;

    /// Longest prefix (BOS included) the model accepts.
    fn max_prefix_len(&self) -> usize {
        usize::MAX
    }

    fn encode(&self, src: &[u32]) -> Result<Self::State>;

    /// One row of `vocab_size` log-probabilities per prefix; every prefix
    /// starts with BOS. Banned ids carry `-inf`.
    fn next_log_probs(&self, state: &Self::State, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;

    /// Per-token log-probabilities of `targets` (BOS excluded) under teacher forcing.
    fn token_log_probs(&self, state: &Self::State, targets: &[u32]) -> Result<Vec<f64>> {
        let mut prefix = vec![BOS];
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            let lp = self.next_log_probs(state, std::slice::from_ref(&prefix))?;
            out.push(lp[0][t as usize]);
            prefix.push(t);
        }
        Ok(out)
    }
}

/// Sum of teacher-forced log-probabilities of `targets` (BOS excluded).
pub fn score_sequence<M: SequenceModel>(model: &M, src: &[u32], targets: &[u32]) -> Result<f64> {
    let state = model.encode(src)?;
    Ok(model.token_log_probs(&state, targets)?.iter().sum())
}

fn banned(id: usize) -> bool {
    id == PAD as usize || id == BOS as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// `BOS ... [EOS]`.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Generated tokens: BOS dropped, EOS kept.
    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }

    /// Generated tokens without BOS or the closing EOS.
    pub fn output(&self) -> &[u32] {
        let t = self.targets();
        match t.last() {
            Some(&EOS) => &t[..t.len() - 1],
            _ => t,
        }
    }

    fn key(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.logprob
        } else {
            self.logprob / ((self.tokens.len() - 1) as f64).powf(length_penalty)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub beam: usize,
    /// Generated tokens, EOS included; `None` means `2·|src| + 8`.
    pub max_len: Option<usize>,
    pub length_penalty: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: DEFAULT_BEAM,
            max_len: None,
            length_penalty: 0.0,
        }
    }
}

fn resolve_max_len<M: SequenceModel>(
    model: &M,
    src: &[u32],
    max_len: Option<usize>,
) -> Result<usize> {
    if src.is_empty() {
        return Err(Error::Contract("empty source".into()));
    }
    let want = max_len.unwrap_or_else(|| default_max_len(src.len()));
    if want == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    Ok(want.min(model.max_prefix_len()))
}

/// Argmax decoding; the lowest id wins ties.
pub fn greedy<M: SequenceModel>(
    model: &M,
    src: &[u32],
    max_len: Option<usize>,
) -> Result<BeamHypothesis> {
    let max_len = resolve_max_len(model, src, max_len)?;
    let state = model.encode(src)?;
    let mut tokens = vec![BOS];
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let lp = model.next_log_probs(&state, std::slice::from_ref(&tokens))?;
        let mut best: Option<(usize, f64)> = None;
        for (w, &v) in lp[0].iter().enumerate() {
            if banned(w) || v == f64::NEG_INFINITY {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((w, v));
            }
        }
        let (w, v) =
            best.ok_or_else(|| Error::Numeric("no token has finite probability".into()))?;
        logprob += v;
        tokens.push(w as u32);
        if w as u32 == EOS {
            break;
        }
    }
    Ok(BeamHypothesis {
        tokens,
        logprob,
        finished: true,
    })
}

/// Beam search; returns up to `beam` finished hypotheses, best first.
///
/// Each step keeps the best `2·beam` expansions. An EOS expansion is
/// finalized only when it ranks inside the first `beam`; search stops once
/// `beam` hypotheses are finished. Hypotheses reaching `max_len` without EOS
/// are finished as they stand.
pub fn beam_search<M: SequenceModel>(
    model: &M,
    src: &[u32],
    cfg: &SearchConfig,
) -> Result<Vec<BeamHypothesis>> {
    if cfg.beam == 0 {
        return Err(Error::Contract("beam must be at least 1".into()));
    }
    let max_len = resolve_max_len(model, src, cfg.max_len)?;
    let state = model.encode(src)?;
    let mut active = vec![BeamHypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<u32>> = active.iter().map(|h| h.tokens.clone()).collect();
        let lp = model.next_log_probs(&state, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, row) in lp.iter().enumerate() {
            for (w, &v) in row.iter().enumerate() {
                if banned(w) || v == f64::NEG_INFINITY {
                    continue;
                }
                if v.is_nan() {
                    return Err(Error::Numeric(format!("NaN log-probability for token {w}")));
                }
                cands.push((active[i].logprob + v, i, w));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(2 * cfg.beam);
        let last = step + 1 == max_len;
        let mut next = Vec::with_capacity(cfg.beam);
        for (rank, &(score, i, w)) in cands.iter().enumerate() {
            let mut tokens = active[i].tokens.clone();
            tokens.push(w as u32);
            if w as u32 == EOS {
                if rank < cfg.beam {
                    finished.push(BeamHypothesis {
                        tokens,
                        logprob: score,
                        finished: true,
                    });
                }
            } else if next.len() < cfg.beam {
                next.push(BeamHypothesis {
                    tokens,
                    logprob: score,
                    finished: last,
                });
            }
        }
        if finished.len() >= cfg.beam {
            break;
        }
        if last {
            finished.extend(next);
            break;
        }
        if next.is_empty() {
            break;
        }
        active = next;
    }
    if finished.is_empty() {
        return Err(Error::Numeric("beam search produced no hypothesis".into()));
    }
    // stable: earlier-finished hypotheses win ties
    finished.sort_by(|a, b| {
        b.key(cfg.length_penalty)
            .total_cmp(&a.key(cfg.length_penalty))
    });
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Which search produced a pooled candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Shallow,
    Deep,
    Both,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Shallow => "netS",
            Provenance::Deep => "netD",
            Provenance::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub weight_shallow: f64,
    pub weight_deep: f64,
    /// Divide each log-probability by the candidate length (EOS included).
    pub length_normalize: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            weight_shallow: 0.5,
            weight_deep: 0.5,
            length_normalize: true,
        }
    }
}

impl RerankConfig {
    pub fn score(&self, len: usize, logp_shallow: f64, logp_deep: f64) -> f64 {
        let n = if self.length_normalize {
            len as f64
        } else {
            1.0
        };
        self.weight_shallow * logp_shallow / n + self.weight_deep * logp_deep / n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Generated tokens, EOS included when present.
    pub tokens: Vec<u32>,
    pub score_shallow: f64,
    pub score_deep: f64,
    pub rerank: f64,
    pub source: Provenance,
}

/// Rerank order: higher rerank score, then higher deep score, then the
/// lexicographically smaller sequence first.
pub fn rerank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.rerank
        .total_cmp(&a.rerank)
        .then(b.score_deep.total_cmp(&a.score_deep))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// The best pooled candidate; `None` only for an empty pool.
pub fn select(pool: &[Candidate]) -> Option<&Candidate> {
    pool.iter().min_by(|a, b| rerank_order(a, b))
}

/// Deduplicates `(tokens, provenance)` entries; a sequence found by both searches is tagged `Both`.
pub fn pool_candidates(
    entries: impl IntoIterator<Item = (Vec<u32>, Provenance)>,
) -> Vec<(Vec<u32>, Provenance)> {
    let mut out: Vec<(Vec<u32>, Provenance)> = Vec::new();
    for (tokens, src) in entries {
        match out.iter_mut().find(|(t, _)| *t == tokens) {
            Some((_, p)) if *p != src => *p = Provenance::Both,
            Some(_) => {}
            None => out.push((tokens, src)),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankOutcome {
    pub chosen: Candidate,
    pub pool: Vec<Candidate>,
}

/// Beam search under both networks, pool, score every candidate under both and pick the best.
pub fn deep_shallow_decode<S: SequenceModel, D: SequenceModel>(
    shallow: &S,
    deep: &D,
    src: &[u32],
    search: &SearchConfig,
    rerank: &RerankConfig,
) -> Result<RerankOutcome> {
    let hs = beam_search(shallow, src, search)?;
    let hd = beam_search(deep, src, search)?;
    let pooled = pool_candidates(
        hs.iter()
            .map(|h| (h.targets().to_vec(), Provenance::Shallow))
            .chain(hd.iter().map(|h| (h.targets().to_vec(), Provenance::Deep))),
    );
    let (ss, sd) = (shallow.encode(src)?, deep.encode(src)?);
    let mut pool = Vec::with_capacity(pooled.len());
    for (tokens, source) in pooled {
        let score_shallow: f64 = shallow.token_log_probs(&ss, &tokens)?.iter().sum();
        let score_deep: f64 = deep.token_log_probs(&sd, &tokens)?.iter().sum();
        pool.push(Candidate {
            rerank: rerank.score(tokens.len(), score_shallow, score_deep),
            tokens,
            score_shallow,
            score_deep,
            source,
        });
    }
    let chosen = select(&pool)
        .expect("beam search always yields a hypothesis")
        .clone();
    Ok(RerankOutcome { chosen, pool })
}

/// A grown or shallow network seen through one view, in eval mode.
#[derive(Clone, Copy, Debug)]
pub struct NetView<'m, F: Float> {
    pub model: &'m DepthGrowModel<F>,
    pub view: View,
}

impl<'m, F: Float> NetView<'m, F> {
    pub fn new(model: &'m DepthGrowModel<F>, view: View) -> Result<Self> {
        if view == View::Deep && !model.is_grown() {
            return Err(Error::Contract("deep view needs a grown model".into()));
        }
        Ok(NetView { model, view })
    }

    fn run(
        &self,
        state: &NetState<F>,
        tgt_in: &[u32],
        batch: usize,
        len: usize,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self.model.store(), Mode::Eval);
        let s = state.src_len;
        let tile = |t: &Tensor<F>| -> Result<Tensor<F>> {
            let mut data = Vec::with_capacity(batch * t.numel());
            for _ in 0..batch {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![batch * s, t.shape()[1]], data)
        };
        let h1 = tape.constant(tile(&state.h1)?);
        let h2 = match &state.h2 {
            Some(h) => Some(tape.constant(tile(h)?)),
            None => None,
        };
        let enc = Encoded {
            layout: SeqLayout::unpadded(batch, s),
            h1,
            h2,
        };
        let tl = SeqLayout::unpadded(batch, len);
        let shallow = self
            .model
            .decode_shallow(&mut tape, tgt_in, &tl, &enc, Regime::eval())?;
        let logits = match self.view {
            View::Shallow => shallow.logits,
            View::Deep => {
                self.model
                    .decode_deep(&mut tape, &shallow, &tl, &enc, Regime::eval())?
                    .1
            }
        };
        Ok(tape
            .value(logits)
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

/// Cached encoder outputs of one source sentence.
#[derive(Clone, Debug)]
pub struct NetState<F> {
    src_len: usize,
    h1: Tensor<F>,
    h2: Option<Tensor<F>>,
}

fn mask_banned(row: &mut [f64]) {
    row[PAD as usize] = f64::NEG_INFINITY;
    row[BOS as usize] = f64::NEG_INFINITY;
}

impl<F: Float> SequenceModel for NetView<'_, F> {
    type State = NetState<F>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_prefix_len(&self) -> usize {
        self.model.config().max_len
    }

    fn encode(&self, src: &[u32]) -> Result<NetState<F>> {
        if src.is_empty() {
            return Err(Error::Contract("empty source".into()));
        }
        let mut tape = Tape::new(self.model.store(), Mode::Eval);
        let layout = SeqLayout::unpadded(1, src.len());
        let enc = self.model.encode(
            &mut tape,
            src,
            &layout,
            Regime::eval(),
            self.view == View::Deep,
        )?;
        Ok(NetState {
            src_len: src.len(),
            h1: tape.value(enc.h1).clone(),
            h2: enc.h2.map(|h| tape.value(h).clone()),
        })
    }

    fn next_log_probs(&self, state: &NetState<F>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let len = prefixes.first().map_or(0, Vec::len);
        if len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::Contract(
                "prefixes must be non-empty and of equal length".into(),
            ));
        }
        let ids: Vec<u32> = prefixes.concat();
        let logits = self.run(state, &ids, prefixes.len(), len)?;
        let v = self.vocab_size();
        Ok((0..prefixes.len())
            .map(|b| {
                let row = &logits[((b + 1) * len - 1) * v..(b + 1) * len * v];
                let mut lp = log_softmax_rows(row, v);
                mask_banned(&mut lp);
                lp
            })
            .collect())
    }

    fn token_log_probs(&self, state: &NetState<F>, targets: &[u32]) -> Result<Vec<f64>> {
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let mut tgt_in = vec![BOS];
        tgt_in.extend_from_slice(&targets[..targets.len() - 1]);
        let logits = self.run(state, &tgt_in, 1, tgt_in.len())?;
        let v = self.vocab_size();
        let lp = log_softmax_rows(&logits, v);
        Ok(targets
            .iter()
            .enumerate()
            .map(|(t, &w)| {
                if banned(w as usize) {
                    f64::NEG_INFINITY
                } else {
                    lp[t * v + w as usize]
                }
            })
            .collect())
    }
}

/// Average of the two members' per-step log-probabilities.
#[derive(Clone, Copy, Debug)]
pub struct Ensemble<A, B> {
    pub a: A,
    pub b: B,
}

impl<A: SequenceModel, B: SequenceModel> SequenceModel for Ensemble<A, B> {
    type State = (A::State, B::State);

    fn vocab_size(&self) -> usize {
        self.a.vocab_size()
    }

    fn max_prefix_len(&self) -> usize {
        self.a.max_prefix_len().min(self.b.max_prefix_len())
    }

    fn encode(&self, src: &[u32]) -> Result<Self::State> {
        if self.a.vocab_size() != self.b.vocab_size() {
            return Err(Error::Config(
                "ensemble members disagree on vocabulary size".into(),
            ));
        }
        Ok((self.a.encode(src)?, self.b.encode(src)?))
    }

    fn next_log_probs(&self, state: &Self::State, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let la = self.a.next_log_probs(&state.0, prefixes)?;
        let lb = self.b.next_log_probs(&state.1, prefixes)?;
        Ok(la
            .into_iter()
            .zip(lb)
            .map(|(ra, rb)| ra.iter().zip(&rb).map(|(x, y)| 0.5 * (x + y)).collect())
            .collect())
    }

    fn token_log_probs(&self, state: &Self::State, targets: &[u32]) -> Result<Vec<f64>> {
        let la = self.a.token_log_probs(&state.0, targets)?;
        let lb = self.b.token_log_probs(&state.1, targets)?;
        Ok(la.iter().zip(&lb).map(|(x, y)| 0.5 * (x + y)).collect())
    }
}

/// Toy model whose logits are a fixed hash of `(seed, source, prefix, token)`.
///
/// PAD, BOS and UNK are banned, so `vocab_size = NUM_RESERVED + k` leaves
/// EOS plus `k` content tokens.
#[derive(Clone, Copy, Debug)]
pub struct FixedLogitModel {
    pub vocab_size: usize,
    pub seed: u64,
    /// Added to the EOS logit; positive values favour short outputs.
    pub eos_bias: f64,
}

impl FixedLogitModel {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        assert!(vocab_size > NUM_RESERVED, "need at least one content token");
        FixedLogitModel {
            vocab_size,
            seed,
            eos_bias: 0.0,
        }
    }

    pub fn logits(&self, src: &[u32], prefix: &[u32]) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|w| {
                if banned(w) || w == UNK as usize {
                    return f64::NEG_INFINITY;
                }
                let mut h = DefaultHasher::new();
                (self.seed, src, prefix, w).hash(&mut h);
                let unit = (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
                let bias = if w == EOS as usize {
                    self.eos_bias
                } else {
                    0.0
                };
                4.0 * unit - 2.0 + bias
            })
            .collect()
    }
}

impl SequenceModel for FixedLogitModel {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode(&self, src: &[u32]) -> Result<Vec<u32>> {
        if src.is_empty() {
            return Err(Error::Contract("empty source".into()));
        }
        Ok(src.to_vec())
    }

    fn next_log_probs(&self, src: &Vec<u32>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let z = self.logits(src, p);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                z.iter().map(|v| v - lse).collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beam_one_matches_greedy_on_toy() {
        let m = FixedLogitModel::new(9, 7);
        for s in 0..20u32 {
            let src = vec![4 + s % 5, 5, 6];
            let g = greedy(&m, &src, Some(6)).unwrap();
            let cfg = SearchConfig {
                beam: 1,
                max_len: Some(6),
                ..Default::default()
            };
            let b = beam_search(&m, &src, &cfg).unwrap();
            assert_eq!(b[0], g);
        }
    }

    #[test]
    fn hypotheses_are_ranked_and_bounded() {
        let m = FixedLogitModel::new(8, 1);
        let cfg = SearchConfig {
            beam: 3,
            max_len: Some(5),
            ..Default::default()
        };
        let hs = beam_search(&m, &[4, 5], &cfg).unwrap();
        assert!(hs.len() <= 3);
        for w in hs.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
        }
        for h in &hs {
            assert!(h.logprob <= 0.0);
            assert_eq!(h.tokens[0], BOS);
            assert!(h.tokens.last() == Some(&EOS) || h.targets().len() == 5);
        }
    }

    #[test]
    fn search_score_matches_teacher_forced_score() {
        let m = FixedLogitModel::new(8, 3);
        let hs = beam_search(&m, &[6, 7], &SearchConfig::default()).unwrap();
        let s = score_sequence(&m, &[6, 7], hs[0].targets()).unwrap();
        assert!((s - hs[0].logprob).abs() < 1e-12);
    }

    #[test]
    fn empty_source_is_contract_error() {
        let m = FixedLogitModel::new(8, 3);
        assert!(matches!(
            beam_search(&m, &[], &SearchConfig::default()),
            Err(Error::Contract(_))
        ));
        assert!(matches!(greedy(&m, &[], None), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_dedupes_and_tags_both() {
        let p = pool_candidates(vec![
            (vec![4, 2], Provenance::Shallow),
            (vec![5, 2], Provenance::Shallow),
            (vec![4, 2], Provenance::Deep),
            (vec![6, 2], Provenance::Deep),
        ]);
        assert_eq!(
            p,
            vec![
                (vec![4, 2], Provenance::Both),
                (vec![5, 2], Provenance::Shallow),
                (vec![6, 2], Provenance::Deep),
            ]
        );
    }

    #[test]
    fn tie_breaks_on_deep_then_tokens() {
        let c = |tokens: Vec<u32>, s: f64, d: f64| Candidate {
            tokens,
            score_shallow: s,
            score_deep: d,
            rerank: 0.5 * (s + d),
            source: Provenance::Both,
        };
        let pool = vec![
            c(vec![5], -1.0, -1.0),
            c(vec![4], -1.5, -0.5),
            c(vec![3], -1.5, -0.5),
        ];
        assert_eq!(select(&pool).unwrap().tokens, vec![3]);
    }

    #[test]
    fn rerank_default_is_mean_of_normalized_scores() {
        let r = RerankConfig::default();
        assert!((r.score(4, -2.0, -6.0) - 0.5 * (-0.5 - 1.5)).abs() < 1e-15);
        let raw = RerankConfig {
            length_normalize: false,
            ..r
        };
        assert_eq!(raw.score(4, -2.0, -6.0), -4.0);
    }

    #[test]
    fn ensemble_of_identical_members_equals_member() {
        let m = FixedLogitModel::new(8, 9);
        let e = Ensemble { a: m, b: m };
        let cfg = SearchConfig::default();
        assert_eq!(
            beam_search(&e, &[4, 4, 5], &cfg).unwrap(),
            beam_search(&m, &[4, 4, 5], &cfg).unwrap()
        );
    }
}
