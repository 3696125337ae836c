//! Vocabulary, tokenization, batching and synthetic parallel tasks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Width of the length buckets used by [`make_batches`].
pub const BUCKET_WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Whitespace,
    Char,
}

pub fn tokenize(line: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Whitespace => line.split_whitespace().map(str::to_string).collect(),
        TokenizerMode::Char => line.chars().map(|c| c.to_string()).collect(),
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S], mode: TokenizerMode) -> String {
    let parts: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    match mode {
        TokenizerMode::Whitespace => parts.join(" "),
        TokenizerMode::Char => parts.concat(),
    }
}

/// Token/id bijection; ids `0..4` are always the reserved specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from the non-reserved tokens, in id order.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.iter().map(|t| t.as_ref().to_string()));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    /// Vocabulary of `vocab_size` ids whose content tokens are `t0`, `t1`, ...
    pub fn synthetic(vocab_size: usize) -> Self {
        let names: Vec<String> = (0..vocab_size.saturating_sub(NUM_RESERVED))
            .map(|i| format!("t{i}"))
            .collect();
        Self::new(&names).expect("synthetic names are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED_TOKENS[UNK as usize], String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn encode_line(&self, line: &str, mode: TokenizerMode) -> Vec<u32> {
        self.encode(&tokenize(line, mode))
    }

    /// Text of a generated sequence; stops at the first EOS and drops PAD/BOS.
    pub fn decode_line(&self, ids: &[u32], mode: TokenizerMode) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&toks, mode)
    }

    /// One content token per line; the token on line `k` (1-based) has id `k - 1 + 4`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in self.content_tokens() {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
        Self::new(&lines)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

/// Frequency-ranked vocabulary; ties broken lexicographically.
///
/// `max_size` bounds the total size including the reserved ids.
pub fn build_vocab<'a, I, S>(corpus: I, max_size: usize, min_freq: usize) -> Vocab
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sent in corpus {
        for t in sent {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size.saturating_sub(NUM_RESERVED));
    let names: Vec<&str> = ranked.into_iter().map(|(t, _)| t).collect();
    Vocab::new(&names).expect("counted tokens are unique")
}

/// One aligned source/target sentence pair as ids (no BOS/EOS).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    NoisyCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Fraction of target tokens replaced by a different random token (noisy-copy only).
    pub p_noise: f64,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::Copy,
            p_noise: 0.1,
            vocab_size: 16,
            min_len: 1,
            max_len: 10,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_RESERVED + 1 && self.kind == TaskKind::NoisyCopy {
            return Err(Error::Config(
                "noisy-copy needs at least two content tokens".into(),
            ));
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} has no content ids",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(Error::Config(format!(
                "p_noise {} not in [0,1]",
                self.p_noise
            )));
        }
        Ok(())
    }
}

/// `n` pairs drawn deterministically from `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Pair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lo = NUM_RESERVED as u32;
    let hi = spec.vocab_size as u32;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let src: Vec<u32> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
        let tgt = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.clone();
                t.sort_unstable();
                t
            }
            TaskKind::NoisyCopy => src
                .iter()
                .map(|&tok| {
                    if rng.random::<f64>() < spec.p_noise {
                        // uniform over the other content ids
                        let r = rng.random_range(lo..hi - 1);
                        if r >= tok {
                            r + 1
                        } else {
                            r
                        }
                    } else {
                        tok
                    }
                })
                .collect(),
        };
        pairs.push(Pair { src, tgt });
    }
    Ok(pairs)
}

/// Padded id matrices for one training batch.
///
/// `tgt_in` is BOS-prefixed and `tgt_out` EOS-suffixed, so
/// `tgt_out[t] == tgt_in[t + 1]` at every non-pad position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub src_pad: Vec<bool>,
    pub tgt_pad: Vec<bool>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("batch of zero pairs".into()));
        }
        if let Some(p) = pairs.iter().find(|p| p.src.is_empty()) {
            return Err(Error::Data(format!(
                "empty source sentence (target {:?})",
                p.tgt
            )));
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(1);
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            src_pad: vec![true; size * src_len],
            tgt_pad: vec![true; size * tgt_len],
        };
        for (i, p) in pairs.iter().enumerate() {
            for (j, &t) in p.src.iter().enumerate() {
                b.src[i * src_len + j] = t;
                b.src_pad[i * src_len + j] = false;
            }
            let row = i * tgt_len;
            b.tgt_in[row] = BOS;
            for (j, &t) in p.tgt.iter().enumerate() {
                b.tgt_in[row + j + 1] = t;
                b.tgt_out[row + j] = t;
            }
            b.tgt_out[row + p.tgt.len()] = EOS;
            for j in 0..=p.tgt.len() {
                b.tgt_pad[row + j] = false;
            }
        }
        Ok(b)
    }

    /// Non-pad target tokens (the loss denominator).
    pub fn target_tokens(&self) -> usize {
        self.tgt_pad.iter().filter(|&&p| !p).count()
    }
}

fn pair_cost(p: &Pair) -> usize {
    p.src.len().max(p.tgt.len() + 1)
}

/// One epoch of length-bucketed batches.
///
/// Pairs are grouped into buckets of width [`BUCKET_WIDTH`] by padded length,
/// shuffled within buckets, packed so that `size * longest <= batch_tokens`
/// (at least one pair per batch), and the batch order is shuffled. With
/// `deterministic` the order is a pure function of `seed`; otherwise the seed
/// is mixed with OS entropy.
pub fn make_batches(
    pairs: &[Pair],
    batch_tokens: usize,
    seed: u64,
    deterministic: bool,
) -> Result<Vec<Batch>> {
    let seed = if deterministic {
        seed
    } else {
        seed ^ rand::rng().random::<u64>()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let b = pair_cost(p) / BUCKET_WIDTH;
        if buckets.len() <= b {
            buckets.resize_with(b + 1, Vec::new);
        }
        buckets[b].push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for bucket in &mut buckets {
        bucket.shuffle(&mut rng);
        let mut cur: Vec<usize> = Vec::new();
        let mut longest = 0;
        for &i in bucket.iter() {
            let cost = pair_cost(&pairs[i]);
            let new_longest = longest.max(cost);
            if !cur.is_empty() && (cur.len() + 1) * new_longest > batch_tokens {
                groups.push(std::mem::take(&mut cur));
                longest = 0;
            }
            longest = longest.max(cost);
            cur.push(i);
        }
        if !cur.is_empty() {
            groups.push(cur);
        }
    }
    groups.shuffle(&mut rng);
    groups
        .iter()
        .map(|g| Batch::from_pairs(&g.iter().map(|&i| &pairs[i]).collect::<Vec<_>>()))
        .collect()
}

/// Line-aligned UTF-8 source/target files; CRLF is normalized to LF.
pub fn load_parallel_corpus(src_path: &Path, tgt_path: &Path) -> Result<Vec<(String, String)>> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
        Ok(text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect())
    };
    let src = read(src_path)?;
    let tgt = read(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).collect())
}

/// Encodes text pairs with `vocab`.
pub fn encode_pairs(lines: &[(String, String)], vocab: &Vocab, mode: TokenizerMode) -> Vec<Pair> {
    lines
        .iter()
        .map(|(s, t)| Pair {
            src: vocab.encode_line(s, mode),
            tgt: vocab.encode_line(t, mode),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_and_empty_tokenization() {
        assert_eq!(tokenize("a b", TokenizerMode::Whitespace), vec!["a", "b"]);
        assert!(tokenize("", TokenizerMode::Whitespace).is_empty());
        assert!(tokenize("", TokenizerMode::Char).is_empty());
    }

    #[test]
    fn char_mode_roundtrips_multibyte() {
        let line = "héllo, wörld ✓ 日本";
        let toks = tokenize(line, TokenizerMode::Char);
        assert_eq!(toks.len(), line.chars().count());
        assert_eq!(detokenize(&toks, TokenizerMode::Char), line);
        assert_eq!(
            detokenize(&toks, TokenizerMode::Char).as_bytes(),
            line.as_bytes()
        );
    }

    #[test]
    fn copy_and_reverse_relations() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::Copy,
            ..Default::default()
        };
        for p in gen_synthetic(&spec, 50).unwrap() {
            assert_eq!(p.src, p.tgt);
        }
        let spec = SyntheticTaskSpec {
            kind: TaskKind::Reverse,
            min_len: 1,
            max_len: 1,
            ..Default::default()
        };
        for p in gen_synthetic(&spec, 10).unwrap() {
            assert_eq!(p.src, p.tgt);
        }
    }

    #[test]
    fn sort_task_matches_independent_sort() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::Sort,
            vocab_size: 40,
            ..Default::default()
        };
        for p in gen_synthetic(&spec, 100).unwrap() {
            // counting sort over the id range as the oracle
            let mut counts = [0usize; 40];
            for &t in &p.src {
                counts[t as usize] += 1;
            }
            let oracle: Vec<u32> = (0..40u32)
                .flat_map(|t| std::iter::repeat_n(t, counts[t as usize]))
                .collect();
            assert_eq!(p.tgt, oracle);
        }
    }

    #[test]
    fn noisy_copy_rate_is_close_to_p_noise() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::NoisyCopy,
            p_noise: 0.1,
            vocab_size: 32,
            min_len: 5,
            max_len: 15,
            seed: 9,
        };
        let pairs = gen_synthetic(&spec, 4000).unwrap();
        let (mut diff, mut total) = (0usize, 0usize);
        for p in &pairs {
            assert_eq!(p.src.len(), p.tgt.len());
            diff += p.src.iter().zip(&p.tgt).filter(|(a, b)| a != b).count();
            total += p.src.len();
        }
        let rate = diff as f64 / total as f64;
        // 40k tokens: standard error ~0.0015
        assert!((rate - 0.1).abs() < 0.01, "noise rate {rate}");
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::NoisyCopy,
            ..Default::default()
        };
        assert_eq!(
            gen_synthetic(&spec, 30).unwrap(),
            gen_synthetic(&spec, 30).unwrap()
        );
    }

    #[test]
    fn vocab_single_token_and_oov() {
        let corpus = [vec!["x".to_string(); 3]];
        let v = build_vocab(corpus.iter().map(|s| s.as_slice()), 100, 1);
        assert_eq!(v.len(), NUM_RESERVED + 1);
        assert_eq!(v.id("x"), 4);
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn vocab_truncation_follows_frequency_then_lexicographic() {
        let text = "b b b a a c c d";
        let corpus = [tokenize(text, TokenizerMode::Whitespace)];
        let v = build_vocab(corpus.iter().map(|s| s.as_slice()), NUM_RESERVED + 3, 1);
        // counts: b=3, a=2, c=2, d=1 -> b, a, c
        assert_eq!(v.content_tokens(), &["b", "a", "c"]);
        let v = build_vocab(corpus.iter().map(|s| s.as_slice()), 100, 2);
        assert_eq!(v.len(), NUM_RESERVED + 3);
    }

    #[test]
    fn vocab_file_ids_start_after_reserved() {
        let v = Vocab::new(&["hello", "world"]).unwrap();
        let text = v.to_file_string();
        assert_eq!(text, "hello\nworld\n");
        let back = Vocab::from_file_string(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("world"), 5);
        assert_eq!(back.token(BOS), "<s>");
    }

    #[test]
    fn single_pair_single_batch_with_masks() {
        let p = Pair {
            src: vec![5, 6, 7],
            tgt: vec![8, 9],
        };
        let batches = make_batches(std::slice::from_ref(&p), 1024, 0, true).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.tgt_in, vec![BOS, 8, 9]);
        assert_eq!(b.tgt_out, vec![8, 9, EOS]);
        assert!(b.src_pad.iter().all(|&x| !x));
    }

    #[test]
    fn pad_positions_are_exactly_masked() {
        let a = Pair {
            src: vec![5],
            tgt: vec![5],
        };
        let b = Pair {
            src: vec![5, 6, 7],
            tgt: vec![5, 6, 7],
        };
        let batch = Batch::from_pairs(&[&a, &b]).unwrap();
        for (i, &id) in batch.src.iter().enumerate() {
            assert_eq!(batch.src_pad[i], id == PAD);
        }
        for (i, &id) in batch.tgt_in.iter().enumerate() {
            assert_eq!(batch.tgt_pad[i], id == PAD);
        }
    }

    #[test]
    fn corpus_mismatch_and_crlf() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        fs::write(&s, "a b\r\nc\r\n").unwrap();
        fs::write(&t, "x\ny z\n").unwrap();
        let lines = load_parallel_corpus(&s, &t).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].0.as_bytes(), b"a b");
        assert_eq!(lines[1], ("c".to_string(), "y z".to_string()));
        fs::write(&t, "x\n").unwrap();
        assert!(matches!(load_parallel_corpus(&s, &t), Err(Error::Data(_))));
    }
}
