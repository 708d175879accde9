mod common;

use fpmine_core::encoders::{
    generate_synthetic_dataset, Dataset, EmbeddingBundle, EncodedBatch, SyntheticConfig,
};
use fpmine_core::evaluation::{rank_scores, recall_at_k};
use fpmine_core::losses::{cross_relu_matched_value, cross_relu_mismatched_value, LossWeights};
use fpmine_core::numerics::{Tape, Tensor};
use fpmine_core::sampling::Sampler;
use fpmine_core::similarity::{
    cosine, mining_mask, negative_similarity, score_batch, FpmParams, MiningOptions, MiningVars,
    SimilarityBreakdown,
};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

const K: usize = 3;
const P: usize = 4;
const C: usize = 5;
const M: usize = 3;

fn bundle(words: Option<usize>) -> impl Strategy<Value = EmbeddingBundle> {
    let rows = words.unwrap_or(K);
    (values(P), values(K * P), values(rows * C)).prop_map(move |(g, l, parts)| EmbeddingBundle {
        global: tensor(&[P], g),
        local: tensor(&[K, P], l),
        parts: tensor(&[rows, C], parts),
        valid_len: words,
    })
}

fn texts() -> impl Strategy<Value = Vec<EmbeddingBundle>> {
    prop::collection::vec(1usize..5, 1..4)
        .prop_flat_map(|lens| lens.into_iter().map(|l| bundle(Some(l))).collect::<Vec<_>>())
}

fn fpm() -> impl Strategy<Value = FpmParams> {
    (values(C * M), values(C * M)).prop_map(|(t, p)| FpmParams {
        theta: tensor(&[C, M], t),
        phi: tensor(&[C, M], p),
    })
}

fn stack(tape: &mut Tape, items: &[EmbeddingBundle]) -> EncodedBatch {
    let mut global = Vec::new();
    let mut local = Vec::new();
    let mut parts = Vec::new();
    let mut segments = Vec::new();
    for b in items {
        global.extend_from_slice(b.global.data());
        local.extend_from_slice(b.local.data());
        let start = parts.len() / C;
        parts.extend_from_slice(b.parts.data());
        segments.push(start..parts.len() / C);
    }
    let n = items.len();
    let rows = parts.len() / C;
    EncodedBatch {
        global: tape.constant(tensor(&[n, P], global)),
        local: tape.constant(tensor(&[n, K * P], local)),
        parts: tape.constant(tensor(&[rows, C], parts)),
        segments,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_is_min_with_zero(s in -10.0f64..10.0) {
        prop_assert_eq!(mining_mask(s), s.min(0.0));
        prop_assert!(mining_mask(s) <= 0.0);
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(a in values(6), b in values(6), scale in 0.1f64..10.0) {
        let c = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine(&b, &a));
        let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
        prop_assert!((cosine(&scaled, &b) - c).abs() < 1e-12);
    }

    #[test]
    fn negative_similarity_is_nonpositive_and_exact_when_all_positive(
        scores in prop::collection::vec(-1.0f64..1.0, 1..10),
        s_l in -1.0f64..1.0,
    ) {
        let (neg, local_neg) = negative_similarity(&scores, s_l).unwrap();
        prop_assert!(neg <= 0.0);
        prop_assert_eq!(local_neg, s_l + neg);
        let expected: f64 = scores.iter().filter(|&&s| s < 0.0).sum();
        prop_assert!((neg - expected).abs() < 1e-12);
        if scores.iter().all(|&s| s >= 0.0) {
            prop_assert_eq!(neg, 0.0);
        }
    }

    #[test]
    fn breakdown_fuses_the_three_branches(img in bundle(None), txt in bundle(Some(4)), p in fpm()) {
        let b = SimilarityBreakdown::compute(&img, &txt, Some(&p), MiningOptions::default()).unwrap();
        prop_assert!((b.s_overall - (b.s_g + b.s_l + b.s_local_neg)).abs() < 1e-12);
        prop_assert!((b.s_local_neg - (b.s_l + b.s_neg)).abs() < 1e-12);
        prop_assert_eq!(b.word_scores.len(), 4);
        prop_assert!(b.word_regions.iter().all(|&r| r < K));
        prop_assert!(b.s_neg >= -4.0 && b.s_neg <= 0.0);
    }

    #[test]
    fn batch_scores_agree_with_per_pair_scores(
        images in prop::collection::vec(bundle(None), 1..4),
        texts in texts(),
        p in fpm(),
        mask in any::<bool>(),
    ) {
        let mut tape = Tape::new();
        let ib = stack(&mut tape, &images);
        let tb = stack(&mut tape, &texts);
        let theta = tape.constant(p.theta.clone());
        let phi = tape.constant(p.phi.clone());
        let mining = MiningVars { theta, phi, mask, boundary: None };
        let s = score_batch(&mut tape, &ib, &tb, Some(mining), K).unwrap();
        let opts = MiningOptions { mask, boundary: 0.0 };
        for (i, img) in images.iter().enumerate() {
            for (t, txt) in texts.iter().enumerate() {
                let b = SimilarityBreakdown::compute(img, txt, Some(&p), opts).unwrap();
                let at = |v| tape.value(v).get(i, t);
                prop_assert!((at(s.s_g) - b.s_g).abs() < 1e-12);
                prop_assert!((at(s.s_l) - b.s_l).abs() < 1e-12);
                prop_assert!((at(s.s_neg) - b.s_neg).abs() < 1e-12);
                prop_assert!((at(s.s_local_neg) - b.s_local_neg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matched_loss_vanishes_exactly_above_its_margin(scores in prop::collection::vec(-0.3f64..0.3, 1..8)) {
        let w = LossWeights::default();
        let l = cross_relu_matched_value(&scores, &w).unwrap();
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, min >= 0.001);
    }

    #[test]
    fn mismatched_loss_vanishes_exactly_below_its_margin(scores in prop::collection::vec(-0.3f64..0.3, 1..8)) {
        let w = LossWeights::default();
        let l = cross_relu_mismatched_value(&scores, &w).unwrap();
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, min <= -0.15);
    }

    #[test]
    fn ranking_is_a_descending_permutation(scores in prop::collection::vec(-3.0f64..3.0, 0..40)) {
        let order = rank_scores(&scores);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn negative_evidence_never_raises_a_rank(
        scores in prop::collection::vec(-3.0f64..3.0, 2..30),
        pick in any::<prop::sample::Index>(),
        penalty in 1e-6f64..1.0,
    ) {
        let item = pick.index(scores.len());
        let before = rank_scores(&scores).iter().position(|&g| g == item).unwrap();
        let mut lowered = scores.clone();
        lowered[item] -= penalty;
        let after = rank_scores(&lowered).iter().position(|&g| g == item).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn recall_matches_brute_force(
        grid in (1usize..12, 1usize..12).prop_flat_map(|(q, g)| (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, g), q),
            prop::collection::vec(0usize..4, q),
            prop::collection::vec(0usize..4, g),
        )),
        k in 1usize..15,
    ) {
        let (scores, qid, gid) = grid;
        let rankings: Vec<Vec<usize>> = scores.iter().map(|s| rank_scores(s)).collect();
        let hits = scores.iter().zip(&qid).filter(|(row, &q)| {
            // The item at rank r beats exactly r others under the tie rule.
            (0..row.len()).any(|j| {
                let better = (0..row.len())
                    .filter(|&o| row[o] > row[j] || (row[o] == row[j] && o < j))
                    .count();
                better < k && gid[j] == q
            })
        }).count();
        let expected = 100.0 * hits as f64 / scores.len() as f64;
        prop_assert_eq!(recall_at_k(&rankings, &qid, &gid, k).unwrap(), expected);
    }

    #[test]
    fn sampler_batches_are_balanced_and_cover_the_pool(
        identities in 2usize..8,
        per in 1usize..5,
        half in 1usize..6,
        seed in any::<u64>(),
        epoch in 0usize..4,
    ) {
        let ids: Vec<usize> = (0..identities * per).map(|i| i / per).collect();
        prop_assume!(ids.len() >= half);
        let s = Sampler::new((0..ids.len()).collect(), ids.clone(), 2 * half, true, seed).unwrap();
        let batches = s.epoch(epoch);
        prop_assert_eq!(batches.len(), ids.len() / half);
        let mut seen = std::collections::BTreeSet::new();
        for b in &batches {
            prop_assert_eq!(b.matched.len(), half);
            prop_assert_eq!(b.mismatched.len(), half);
            for &(i, t) in &b.matched {
                prop_assert_eq!(i, t);
                prop_assert!(seen.insert(i));
            }
            for &(i, t) in &b.mismatched {
                prop_assert_ne!(ids[i], ids[t]);
            }
        }
    }
}

#[test]
fn dataset_round_trips_through_both_formats() {
    let ds = generate_synthetic_dataset(5, 4, 3, &SyntheticConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("d.bin");
    let json = dir.path().join("d.json");
    ds.write_binary(&bin).unwrap();
    ds.write_json(&json).unwrap();
    let from_bin = Dataset::load(&bin).unwrap();
    assert_eq!(from_bin.samples, ds.samples);
    assert_eq!(from_bin.dims, ds.dims);
    assert_eq!(Dataset::load(&json).unwrap(), ds);
}

#[test]
fn mask_law_holds_on_a_fine_grid() {
    for i in 0..=2000 {
        let s = -1.0 + i as f64 * 1e-3;
        assert_eq!(mining_mask(s), s.min(0.0), "at {s}");
    }
}
