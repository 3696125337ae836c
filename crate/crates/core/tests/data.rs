use std::collections::HashMap;

use depthgrow_core::data::{
    build_vocab, detokenize, gen_synthetic, load_parallel_corpus, make_batches, tokenize, Batch,
    Pair, SyntheticTaskSpec, TaskKind, TokenizerMode, Vocab, BOS, EOS, PAD, UNK,
};
use depthgrow_core::Error;
use proptest::prelude::*;

fn spec(kind: TaskKind, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        kind,
        p_noise: 0.1,
        vocab_size: 20,
        min_len: 1,
        max_len: 12,
        seed,
    }
}

#[test]
fn synthetic_relations_hold() {
    for p in gen_synthetic(&spec(TaskKind::Copy, 1), 200).unwrap() {
        assert_eq!(p.src, p.tgt);
    }
    for p in gen_synthetic(&spec(TaskKind::Reverse, 2), 200).unwrap() {
        let mut r = p.tgt.clone();
        r.reverse();
        assert_eq!(p.src, r);
        if p.src.len() == 1 {
            assert_eq!(p.src, p.tgt);
        }
    }
    for p in gen_synthetic(&spec(TaskKind::Sort, 3), 200).unwrap() {
        // counting-sort oracle
        let mut counts = [0usize; 20];
        for &t in &p.src {
            counts[t as usize] += 1;
        }
        let oracle: Vec<u32> = (0..20u32)
            .flat_map(|t| std::iter::repeat_n(t, counts[t as usize]))
            .collect();
        assert_eq!(p.tgt, oracle);
    }
}

#[test]
fn noisy_copy_rate_matches_p_noise() {
    let pairs = gen_synthetic(&spec(TaskKind::NoisyCopy, 4), 5000).unwrap();
    let (mut changed, mut total) = (0usize, 0usize);
    for p in &pairs {
        assert_eq!(p.src.len(), p.tgt.len());
        for (a, b) in p.src.iter().zip(&p.tgt) {
            total += 1;
            changed += usize::from(a != b);
            assert!(*b >= 4 && *b < 20);
        }
    }
    let rate = changed as f64 / total as f64;
    // binomial standard error is about 0.0018 here
    assert!((rate - 0.1).abs() < 0.01, "{rate}");
}

#[test]
fn generation_is_reproducible_per_seed() {
    for kind in [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Sort,
        TaskKind::NoisyCopy,
    ] {
        let a = gen_synthetic(&spec(kind, 9), 50).unwrap();
        assert_eq!(a, gen_synthetic(&spec(kind, 9), 50).unwrap());
        assert_ne!(a, gen_synthetic(&spec(kind, 10), 50).unwrap());
    }
}

#[test]
fn bad_specs_are_config_errors() {
    let mut s = spec(TaskKind::Copy, 1);
    s.min_len = 0;
    assert!(matches!(gen_synthetic(&s, 1), Err(Error::Config(_))));
    let mut s = spec(TaskKind::NoisyCopy, 1);
    s.p_noise = 1.5;
    assert!(matches!(gen_synthetic(&s, 1), Err(Error::Config(_))));
}

#[test]
fn tokenization_examples() {
    assert_eq!(tokenize("a b", TokenizerMode::Whitespace), vec!["a", "b"]);
    assert!(tokenize("", TokenizerMode::Whitespace).is_empty());
    let line = "grüße, 東京!";
    let chars = tokenize(line, TokenizerMode::Char);
    assert_eq!(chars.len(), line.chars().count());
    assert_eq!(detokenize(&chars, TokenizerMode::Char), line);
}

#[test]
fn vocab_ranks_by_frequency_then_lexicographically() {
    let corpus: Vec<Vec<&str>> = vec![vec!["b", "a", "c", "a"], vec!["c", "d", "b", "e"]];
    let v = build_vocab(corpus.iter().map(Vec::as_slice), 7, 1);
    // counts: a2 b2 c2 d1 e1; 7 - 4 reserved leaves 3 slots
    assert_eq!(v.content_tokens(), &["a", "b", "c"]);
    assert_eq!(v.id("a"), 4);
    assert_eq!(v.id("e"), UNK);
    let one: Vec<Vec<&str>> = vec![vec!["x"]];
    let v = build_vocab(one.iter().map(Vec::as_slice), 100, 1);
    assert_eq!(v.len(), 5);
    let v = build_vocab(corpus.iter().map(Vec::as_slice), 100, 2);
    assert_eq!(v.content_tokens(), &["a", "b", "c"]);
}

#[test]
fn vocab_truncation_count_matches_frequency_oracle() {
    let text = "the cat and the dog and the bird saw a cat";
    let corpus = [text.split(' ').collect::<Vec<_>>()];
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in text.split(' ') {
        *counts.entry(w).or_default() += 1;
    }
    let mut ranked: Vec<_> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    for max in 4..12 {
        let v = build_vocab(corpus.iter().map(Vec::as_slice), max, 1);
        let keep = (max - 4).min(ranked.len());
        assert_eq!(v.len(), 4 + keep);
        let expected: Vec<&str> = ranked[..keep].iter().map(|(w, _)| *w).collect();
        assert_eq!(v.content_tokens(), expected.as_slice());
    }
}

#[test]
fn vocab_file_roundtrip_keeps_reserved_ids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = Vocab::new(&["hello", "world", "ü"]).unwrap();
    v.save(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "hello\nworld\nü\n");
    let back = Vocab::load(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.id("world"), 2 - 1 + 4);
    assert_eq!(
        (
            back.token(PAD),
            back.token(BOS),
            back.token(EOS),
            back.token(UNK)
        ),
        ("<pad>", "<s>", "</s>", "<unk>")
    );
    assert!(Vocab::new(&["a", "a"]).is_err());
}

#[test]
fn corpus_loading_normalizes_crlf_and_checks_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t, short) = (
        dir.path().join("s"),
        dir.path().join("t"),
        dir.path().join("u"),
    );
    std::fs::write(&s, b"a b\r\nc d\r\n").unwrap();
    std::fs::write(&t, b"x y\nz w\n").unwrap();
    std::fs::write(&short, b"only\n").unwrap();
    let pairs = load_parallel_corpus(&s, &t).unwrap();
    assert_eq!(
        pairs,
        vec![
            ("a b".to_string(), "x y".to_string()),
            ("c d".to_string(), "z w".to_string())
        ]
    );
    assert!(pairs.iter().all(|(a, _)| !a.as_bytes().contains(&b'\r')));
    assert!(matches!(
        load_parallel_corpus(&s, &short),
        Err(Error::Data(_))
    ));
}

#[test]
fn single_pair_makes_single_batch() {
    let p = vec![Pair {
        src: vec![4, 5],
        tgt: vec![6],
    }];
    let b = make_batches(&p, 1, 0, true).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].tgt_in, vec![BOS, 6]);
    assert_eq!(b[0].tgt_out, vec![6, EOS]);
}

fn pairs() -> impl Strategy<Value = Vec<Pair>> {
    let sent = |lo: usize| prop::collection::vec(4u32..30, lo..20);
    prop::collection::vec(
        (sent(1), sent(0)).prop_map(|(src, tgt)| Pair { src, tgt }),
        1..60,
    )
}

proptest! {
    #[test]
    fn every_pair_is_batched_exactly_once(ps in pairs(), tokens in 1usize..200, seed in any::<u64>()) {
        let batches = make_batches(&ps, tokens, seed, true).unwrap();
        let mut seen: HashMap<Pair, usize> = HashMap::new();
        for b in &batches {
            let longest = b.src_len.max(b.tgt_len);
            prop_assert!(b.size == 1 || b.size * longest <= tokens);
            for i in 0..b.size {
                let src: Vec<u32> = b.src[i * b.src_len..(i + 1) * b.src_len].iter().copied().filter(|&t| t != PAD).collect();
                let row = &b.tgt_out[i * b.tgt_len..(i + 1) * b.tgt_len];
                let tgt: Vec<u32> = row.iter().copied().take_while(|&t| t != EOS).collect();
                *seen.entry(Pair { src, tgt }).or_default() += 1;
            }
        }
        let mut want: HashMap<Pair, usize> = HashMap::new();
        for p in &ps {
            *want.entry(p.clone()).or_default() += 1;
        }
        prop_assert_eq!(seen, want);
        prop_assert_eq!(batches.clone(), make_batches(&ps, tokens, seed, true).unwrap());
    }

    #[test]
    fn batches_are_aligned_and_masked(ps in pairs()) {
        let refs: Vec<&Pair> = ps.iter().collect();
        let b = Batch::from_pairs(&refs).unwrap();
        for i in 0..b.size {
            for t in 0..b.tgt_len {
                let k = i * b.tgt_len + t;
                prop_assert_eq!(b.tgt_pad[k], b.tgt_out[k] == PAD);
                if !b.tgt_pad[k] && t + 1 < b.tgt_len && !b.tgt_pad[k + 1] {
                    prop_assert_eq!(b.tgt_out[k], b.tgt_in[k + 1]);
                }
            }
            for s in 0..b.src_len {
                let k = i * b.src_len + s;
                prop_assert_eq!(b.src_pad[k], b.src[k] == PAD);
            }
        }
    }

    #[test]
    fn encode_decode_roundtrip(words in prop::collection::vec("[a-z]{1,4}", 0..12)) {
        let v = build_vocab(std::iter::once(words.as_slice()), 1000, 1);
        let ids = v.encode(&words);
        let back: Vec<String> = v.decode(&ids).into_iter().map(String::from).collect();
        prop_assert_eq!(&back, &words);
        prop_assert_eq!(v.encode(&back), ids);
        let line = words.join(" ");
        prop_assert_eq!(v.decode_line(&v.encode_line(&line, TokenizerMode::Whitespace), TokenizerMode::Whitespace), line);
    }
}
