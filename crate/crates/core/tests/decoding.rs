use depthgrow_core::data::{BOS, EOS};
use depthgrow_core::decoding::{
    beam_search, deep_shallow_decode, greedy, score_sequence, select, Candidate, Ensemble,
    FixedLogitModel, NetView, Provenance, RerankConfig, SearchConfig, SequenceModel,
};
use depthgrow_core::{DepthGrowModel, GrowOptions, ModelConfig, Precision, View};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn search(beam: usize, max_len: usize) -> SearchConfig {
    SearchConfig {
        beam,
        max_len: Some(max_len),
        length_penalty: 0.0,
    }
}

/// Log-probability of `targets` computed straight from the toy logits.
fn oracle_logprob(m: &FixedLogitModel, src: &[u32], targets: &[u32]) -> f64 {
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    for &t in targets {
        let z = m.logits(src, &prefix);
        let finite: Vec<f64> = z.iter().copied().filter(|v| v.is_finite()).collect();
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + finite.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += z[t as usize] - lse;
        prefix.push(t);
    }
    total
}

/// Every complete output over `tokens` with at most `max_len` generated ids.
fn enumerate(tokens: &[u32], max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for &t in tokens {
                let mut s: Vec<u32> = p.clone();
                s.push(t);
                if t == EOS || len == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn two_token_beam_matches_exhaustive_enumeration() {
    for seed in 0..200 {
        let mut m = FixedLogitModel::new(5, seed);
        m.eos_bias = (seed % 7) as f64 * 0.4 - 1.2;
        let src = [4, 4, (seed % 3) as u32 + 4];
        let mut all: Vec<(f64, Vec<u32>)> = enumerate(&[EOS, 4], 3)
            .into_iter()
            .map(|s| (oracle_logprob(&m, &src, &s), s))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let got = beam_search(&m, &src, &search(4, 3)).unwrap();
        assert_eq!(got.len(), 4);
        for (h, (score, seq)) in got.iter().zip(&all) {
            assert_eq!(h.targets(), seq.as_slice(), "seed {seed}");
            assert!((h.logprob - score).abs() < 1e-12);
        }
    }
}

#[test]
fn wide_beam_is_exhaustive_on_three_tokens() {
    for seed in 0..100 {
        let m = FixedLogitModel::new(6, seed);
        let src = [5, 6];
        let best = enumerate(&[EOS, 4, 5], 3)
            .into_iter()
            .map(|s| (oracle_logprob(&m, &src, &s), s))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        let got = beam_search(&m, &src, &search(20, 3)).unwrap();
        assert_eq!(got[0].targets(), best.1.as_slice());
    }
}

#[test]
fn beam_one_equals_greedy_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let m = FixedLogitModel::new(10, i);
        let len = rng.random_range(1..8);
        let src: Vec<u32> = (0..len).map(|_| rng.random_range(4..10)).collect();
        assert_eq!(
            beam_search(&m, &src, &search(1, 12)).unwrap()[0],
            greedy(&m, &src, Some(12)).unwrap()
        );
    }
}

fn tiny_net() -> DepthGrowModel<f32> {
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        n_bottom_blocks: 1,
        n_top_blocks: 1,
        vocab_size: 14,
        dropout: 0.0,
        max_len: 24,
        precision: Precision::F32,
    };
    let opts = GrowOptions {
        zero_init_output_projections: false,
        ..Default::default()
    };
    DepthGrowModel::new_shallow(&cfg, 4)
        .unwrap()
        .grow(1, 5, opts)
        .unwrap()
}

#[test]
fn network_beam_one_equals_greedy_and_scores_agree() {
    let model = tiny_net();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for view in [View::Shallow, View::Deep] {
        let net = NetView::new(&model, view).unwrap();
        for _ in 0..20 {
            let len = rng.random_range(1..6);
            let src: Vec<u32> = (0..len).map(|_| rng.random_range(4..14)).collect();
            let g = greedy(&net, &src, None).unwrap();
            let b = beam_search(&net, &src, &search(1, 2 * len + 8)).unwrap();
            assert_eq!(b[0], g);
            let top = &beam_search(&net, &src, &SearchConfig::default()).unwrap()[0];
            let s = score_sequence(&net, &src, top.targets()).unwrap();
            assert!((s - top.logprob).abs() < 1e-4, "{s} vs {}", top.logprob);
        }
    }
}

#[test]
fn single_token_target_is_one_softmax() {
    let model = tiny_net();
    let net = NetView::new(&model, View::Deep).unwrap();
    let src = [4, 5, 6];
    let logits = model.forward_net_d(&src, &[BOS]).unwrap();
    let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let s = score_sequence(&net, &src, &[EOS]).unwrap();
    assert!((s - (row[EOS as usize] - lse)).abs() < 1e-6);
}

#[test]
fn appending_tokens_never_raises_the_score() {
    let model = tiny_net();
    let net = NetView::new(&model, View::Shallow).unwrap();
    let src = [7, 8];
    let seq = [4, 9, 10, 11, EOS];
    let mut prev = 0.0;
    for n in 1..=seq.len() {
        let s = score_sequence(&net, &src, &seq[..n]).unwrap();
        assert!(s <= prev);
        prev = s;
    }
}

#[test]
fn deep_view_needs_grown_model() {
    let cfg = ModelConfig {
        vocab_size: 10,
        ..Default::default()
    };
    let shallow = DepthGrowModel::<f32>::new_shallow(&cfg, 1).unwrap();
    assert!(NetView::new(&shallow, View::Deep).is_err());
}

#[test]
fn rerank_selection_equals_exhaustive_argmax() {
    let cfg = RerankConfig::default();
    for seed in 0..150 {
        let s = FixedLogitModel::new(7, seed);
        let mut d = FixedLogitModel::new(7, seed + 1000);
        d.eos_bias = 0.5;
        let src = [4, 6, 5];
        let sc = search(3, 5);
        let out = deep_shallow_decode(&s, &d, &src, &sc, &cfg).unwrap();

        // independent pool: union of both beams, rescored from raw logits
        let mut pool: Vec<Vec<u32>> = Vec::new();
        for m in [&s, &d] {
            for h in beam_search(m, &src, &sc).unwrap() {
                if !pool.contains(&h.targets().to_vec()) {
                    pool.push(h.targets().to_vec());
                }
            }
        }
        assert_eq!(out.pool.len(), pool.len());
        let mut best: Option<(f64, f64, Vec<u32>)> = None;
        for y in pool {
            let (ls, ld) = (oracle_logprob(&s, &src, &y), oracle_logprob(&d, &src, &y));
            let n = y.len() as f64;
            let r = 0.5 * (ls / n + ld / n);
            let better = match &best {
                None => true,
                Some((br, bd, by)) => r > *br || (r == *br && (ld > *bd || (ld == *bd && y < *by))),
            };
            if better {
                best = Some((r, ld, y));
            }
        }
        let (r, _, y) = best.unwrap();
        assert_eq!(out.chosen.tokens, y, "seed {seed}");
        assert!((out.chosen.rerank - r).abs() < 1e-12);
        for c in &out.pool {
            assert!(out.chosen.rerank >= c.rerank);
        }
    }
}

#[test]
fn agreeing_beams_select_their_shared_top_under_raw_scores() {
    let m = FixedLogitModel::new(8, 42);
    let raw = RerankConfig {
        length_normalize: false,
        ..Default::default()
    };
    let out = deep_shallow_decode(&m, &m, &[4, 5], &SearchConfig::default(), &raw).unwrap();
    let top = beam_search(&m, &[4, 5], &SearchConfig::default()).unwrap();
    assert_eq!(out.chosen.tokens, top[0].targets());
    assert!(out.pool.iter().all(|c| c.source == Provenance::Both));
}

#[test]
fn length_normalization_can_overrule_agreeing_beams() {
    // beam ranks by raw sum; the normalized rerank prefers a longer candidate here
    let m = FixedLogitModel::new(8, 42);
    let out = deep_shallow_decode(
        &m,
        &m,
        &[4, 5],
        &SearchConfig::default(),
        &RerankConfig::default(),
    )
    .unwrap();
    let top = beam_search(&m, &[4, 5], &SearchConfig::default()).unwrap();
    assert_eq!(top[0].targets(), &[7, EOS]);
    assert_eq!(out.chosen.tokens, vec![7, 7, 4, EOS]);
}

#[test]
fn singleton_pool_returns_its_element() {
    let c = Candidate {
        tokens: vec![4, 2],
        score_shallow: -3.0,
        score_deep: -9.0,
        rerank: -3.0,
        source: Provenance::Deep,
    };
    assert_eq!(select(std::slice::from_ref(&c)), Some(&c));
    assert_eq!(select(&[]), None);
}

fn candidate_strategy() -> impl Strategy<Value = Vec<Candidate>> {
    prop::collection::vec(
        (prop::collection::vec(3u32..7, 1..4), -8i32..0, -8i32..0),
        1..10,
    )
    .prop_map(|raw| {
        let mut seen = Vec::new();
        raw.into_iter()
            .filter_map(|(tokens, s, d)| {
                if seen.contains(&tokens) {
                    return None;
                }
                seen.push(tokens.clone());
                // coarse integer scores make ties common
                let (s, d) = (s as f64, d as f64);
                Some(Candidate {
                    rerank: RerankConfig::default().score(tokens.len(), s, d),
                    tokens,
                    score_shallow: s,
                    score_deep: d,
                    source: Provenance::Shallow,
                })
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn rerank_is_invariant_to_pool_order(pool in candidate_strategy(), rot in 0usize..10) {
        let chosen = select(&pool).unwrap().clone();
        let mut shuffled = pool.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(select(&shuffled).unwrap(), &chosen);
        for c in &pool {
            prop_assert!(chosen.rerank >= c.rerank);
        }
    }

    #[test]
    fn beam_hypotheses_are_well_formed(seed in any::<u64>(), beam in 1usize..6, max_len in 1usize..7) {
        let m = FixedLogitModel::new(8, seed);
        let hs = beam_search(&m, &[4, 5, 6], &search(beam, max_len)).unwrap();
        prop_assert!(!hs.is_empty() && hs.len() <= beam);
        for w in hs.windows(2) {
            prop_assert!(w[0].logprob >= w[1].logprob);
        }
        for h in &hs {
            prop_assert!(h.logprob <= 0.0 && h.finished);
            prop_assert_eq!(h.tokens[0], BOS);
            let n = h.targets().len();
            prop_assert!(n <= max_len);
            prop_assert!(h.tokens.last() == Some(&EOS) || n == max_len);
        }
    }

    #[test]
    fn exhaustive_beam_never_loses_to_greedy(seed in any::<u64>()) {
        // with a beam wider than the whole search space nothing is pruned
        let m = FixedLogitModel::new(6, seed);
        let g = greedy(&m, &[4, 5], Some(3)).unwrap();
        let b = beam_search(&m, &[4, 5], &search(20, 3)).unwrap();
        prop_assert!(b[0].logprob >= g.logprob);
    }
}

#[test]
fn narrow_beam_can_lose_to_greedy() {
    // Three short hypotheses finish first and end the search before the
    // longer greedy path completes; widening the beam is not monotone.
    let m = FixedLogitModel {
        vocab_size: 6,
        seed: 11,
        eos_bias: -0.5,
    };
    let src = [4, 5, 8];
    let g = greedy(&m, &src, Some(8)).unwrap();
    let b = beam_search(&m, &src, &search(3, 8)).unwrap();
    assert_eq!(g.targets(), &[5, 5, 5, 4, EOS]);
    assert!(b[0].logprob < g.logprob);
}

#[test]
fn ensemble_scores_are_hand_averaged_log_probs() {
    let a = FixedLogitModel::new(6, 1);
    let b = FixedLogitModel::new(6, 2);
    let e = Ensemble { a, b };
    let src = [4, 5];
    let y = [4, EOS];
    let expected = 0.5 * (oracle_logprob(&a, &src, &y) + oracle_logprob(&b, &src, &y));
    assert!((score_sequence(&e, &src, &y).unwrap() - expected).abs() < 1e-12);
    // two-step toy: each step is the mean of the members' step log-probs
    let state = e.encode(&src).unwrap();
    let steps = e.token_log_probs(&state, &y).unwrap();
    let first = 0.5 * (oracle_logprob(&a, &src, &y[..1]) + oracle_logprob(&b, &src, &y[..1]));
    assert!((steps[0] - first).abs() < 1e-12);
    assert!((steps[0] + steps[1] - expected).abs() < 1e-12);
}
