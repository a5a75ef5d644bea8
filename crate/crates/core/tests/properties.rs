use std::collections::{BTreeMap, BTreeSet};

use eca_core::corpus::{compute_stats, corpus_to_json, parse_corpus, EmotionCausePair};
use eca_core::evaluation::{confusion, score_pairs, PairSets};
use eca_core::montage::{compose_grid, sample_frames};
use eca_core::pipeline::add_self_causes;
use eca_core::prompting::{parse_causes, parse_emotion};
use eca_core::retrieval::{euclidean, EmbeddingRecord, Partition, VectorIndex};
use eca_core::windowing::{classify_position, window_bounds};
use eca_core::{Conversation, EmotionLabel, PositionClass, Utterance};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn label() -> impl Strategy<Value = EmotionLabel> {
    prop::sample::select(EmotionLabel::ALL.to_vec())
}

fn emotional() -> impl Strategy<Value = EmotionLabel> {
    prop::sample::select(EmotionLabel::EMOTIONAL.to_vec())
}

/// A conversation with consistent gold labels and random pairs.
fn conversation(id: String) -> impl Strategy<Value = Conversation> {
    (1usize..=10)
        .prop_flat_map(|len| {
            (
                Just(len),
                prop::collection::vec(label(), len),
                prop::collection::vec(any::<u32>(), 0..12),
            )
        })
        .prop_map(move |(len, labels, seeds)| {
            let utterances: Vec<Utterance> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| Utterance {
                    id: i as u32 + 1,
                    speaker: format!("S{}", i % 3),
                    text: format!("line {i}"),
                    video_ref: None,
                    gold_emotion: Some(*l),
                })
                .collect();
            let emotional: Vec<u32> = utterances
                .iter()
                .filter(|u| !u.gold_emotion.unwrap().is_neutral())
                .map(|u| u.id)
                .collect();
            let mut gold_pairs = BTreeSet::new();
            if !emotional.is_empty() {
                for s in seeds {
                    let e = emotional[s as usize % emotional.len()];
                    let c = (s / 7) % len as u32 + 1;
                    gold_pairs.insert(EmotionCausePair::new(e, labels[e as usize - 1], c).unwrap());
                }
            }
            Conversation {
                id: id.clone(),
                utterances,
                gold_pairs,
            }
        })
}

fn corpus() -> impl Strategy<Value = Vec<Conversation>> {
    (1usize..=6).prop_flat_map(|n| (0..n).map(|i| conversation(format!("c{i}"))).collect::<Vec<_>>())
}

fn pair_set(max_utt: u32) -> impl Strategy<Value = BTreeSet<EmotionCausePair>> {
    prop::collection::btree_set(
        (1..=max_utt, emotional(), 1..=max_utt).prop_map(|(e, l, c)| EmotionCausePair::new(e, l, c).unwrap()),
        0..8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn window_matches_formula(len in 1usize..200, pick in any::<prop::sample::Index>()) {
        let target = pick.index(len) as u32 + 1;
        let (first, last, pos) = window_bounds(target, len).unwrap();
        let (p, n) = pos.bounds();
        prop_assert_eq!(first, target.saturating_sub(p).max(1));
        prop_assert_eq!(last, (target + n).min(len as u32));
        prop_assert!((1..=8).contains(&(last - first + 1)));
        prop_assert!(first <= target && target <= last);
        let expected = if target == 1 {
            PositionClass::Beginning
        } else if target as usize == len {
            PositionClass::End
        } else {
            PositionClass::Middle
        };
        prop_assert_eq!(classify_position(target, len).unwrap(), expected);
    }

    #[test]
    fn window_rejects_out_of_range(len in 1usize..50, extra in 1u32..10) {
        prop_assert!(window_bounds(len as u32 + extra, len).is_err());
        prop_assert!(window_bounds(0, len).is_err());
    }

    #[test]
    fn nearest_equals_exhaustive_sort(
        dim in 1usize..=16,
        raw in prop::collection::vec(prop::collection::vec(-4i8..=4, 16), 1..=64),
        query in prop::collection::vec(-4i8..=4, 16),
        k in 1usize..80,
    ) {
        let mut index = VectorIndex::new(dim, Partition::Conversation);
        let records: Vec<EmbeddingRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, v)| EmbeddingRecord {
                key: format!("r{:03}", (i * 37) % 101),
                vector: v[..dim].iter().map(|x| *x as f32).collect(),
                payload_ref: i.to_string(),
            })
            .collect();
        let mut keys = BTreeSet::new();
        let records: Vec<_> = records.into_iter().filter(|r| keys.insert(r.key.clone())).collect();
        for r in records.iter().rev() {
            index.insert(r.clone()).unwrap();
        }
        let q: Vec<f32> = query[..dim].iter().map(|x| *x as f32).collect();
        let mut oracle: Vec<(f64, String)> = records.iter().map(|r| (euclidean(&r.vector, &q), r.key.clone())).collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<String> = index.nearest(&q, k).unwrap().into_iter().map(|n| n.record.key.clone()).collect();
        let want: Vec<String> = oracle.into_iter().take(k).map(|(_, key)| key).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn parse_causes_stays_in_valid_ids(raw in ".{0,40}", ids in prop::collection::btree_set(1u32..12, 1..6)) {
        if let Ok(parsed) = parse_causes(&raw, &ids) {
            prop_assert!(parsed.cause_ids.is_subset(&ids));
        }
    }

    #[test]
    fn parse_causes_reads_lists(list in prop::collection::vec(1u32..20, 0..6), ids in prop::collection::btree_set(1u32..20, 1..10)) {
        let raw = format!("Answer: [{}]", list.iter().map(u32::to_string).collect::<Vec<_>>().join(", "));
        let parsed = parse_causes(&raw, &ids).unwrap();
        let want: BTreeSet<u32> = list.into_iter().filter(|i| ids.contains(i)).collect();
        prop_assert_eq!(parsed.cause_ids, want);
    }

    #[test]
    fn parse_emotion_after_marker(l in label(), prefix in "[a-z ]{0,20}", upper in any::<bool>()) {
        let name = if upper { l.as_str().to_uppercase() } else { l.as_str().to_string() };
        prop_assert_eq!(parse_emotion(&format!("{prefix} :: {name}.")).unwrap().label, l);
    }

    #[test]
    fn self_causes_idempotent_and_monotone(
        pairs in pair_set(8),
        labels in prop::collection::btree_map(1u32..=8, label(), 0..8),
    ) {
        let once = add_self_causes(&pairs, &labels);
        prop_assert!(once.is_superset(&pairs));
        prop_assert_eq!(add_self_causes(&once, &labels), once.clone());
        for (id, l) in &labels {
            let selfp = EmotionCausePair::new(*id, *l, *id);
            prop_assert_eq!(selfp.is_some_and(|p| once.contains(&p)), !l.is_neutral());
        }
    }

    #[test]
    fn score_pairs_matches_oracle(gold in prop::collection::vec(pair_set(6), 1..10), pred_seed in prop::collection::vec(pair_set(6), 10)) {
        let gold: PairSets = gold.into_iter().enumerate().map(|(i, s)| (format!("c{i}"), s)).collect();
        let pred: PairSets = gold.keys().zip(pred_seed).map(|(k, s)| (k.clone(), s)).collect();
        let eval = score_pairs(&gold, &pred).unwrap();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (conv, g) in &gold {
            let p = &pred[conv];
            tp += p.iter().filter(|x| g.iter().any(|y| y == *x)).count();
            fp += p.iter().filter(|x| !g.iter().any(|y| y == *x)).count();
            fn_ += g.iter().filter(|x| !p.iter().any(|y| y == *x)).count();
        }
        prop_assert_eq!((eval.micro.tp, eval.micro.fp, eval.micro.fn_), (tp, fp, fn_));
        for v in [eval.micro.precision, eval.micro.recall, eval.micro.f1, eval.breakdown.weighted_f1] {
            prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        }
        let supported: Vec<f64> = eval.breakdown.per_label.values().filter(|s| s.support > 0).map(|s| s.score.f1).collect();
        if !supported.is_empty() {
            let lo = supported.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = supported.iter().cloned().fold(0.0, f64::max);
            prop_assert!(eval.breakdown.weighted_f1 >= lo - 1e-12 && eval.breakdown.weighted_f1 <= hi + 1e-12);
        }
    }

    #[test]
    fn confusion_rows_are_gold_counts(pairs in prop::collection::vec((label(), label()), 0..60)) {
        let gold: BTreeMap<usize, EmotionLabel> = pairs.iter().enumerate().map(|(i, p)| (i, p.0)).collect();
        let pred: BTreeMap<usize, EmotionLabel> = pairs.iter().enumerate().map(|(i, p)| (i, p.1)).collect();
        let m = confusion(&gold, &pred).unwrap();
        prop_assert_eq!(m.total(), pairs.len());
        for l in EmotionLabel::ALL {
            prop_assert_eq!(m.row_sum(l), gold.values().filter(|g| **g == l).count());
        }
        prop_assert!(m.weighted_f1.is_finite() && m.accuracy.is_finite());
    }

    #[test]
    fn sample_frames_monotone_and_bounded(n in 1usize..100_000) {
        let idx = sample_frames(n);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|i| *i < n));
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(idx[8], n - 1);
    }

    #[test]
    fn grid_tile_centers_recover_frames(colors in prop::collection::vec(any::<[u8; 3]>(), 9), w in 4u32..40, h in 4u32..40) {
        let frames: Vec<RgbImage> = colors.iter().map(|c| RgbImage::from_pixel(w, h, Rgb(*c))).collect();
        let grid = compose_grid(&frames, "Ross: hi").unwrap();
        for (i, c) in colors.iter().enumerate() {
            prop_assert_eq!(grid.tile_center(i as u32 / 3, i as u32 % 3), Rgb(*c));
        }
        prop_assert_eq!(grid.image.width(), 3 * w);
        prop_assert_eq!(grid.image.height(), 3 * h + grid.strip_height);
    }

    #[test]
    fn corpus_round_trip(c in corpus()) {
        let back = parse_corpus(&corpus_to_json(&c)).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn stats_permutation_invariant(c in corpus(), rot in 0usize..6) {
        let base = compute_stats(&c).unwrap();
        let mut shuffled = c.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        prop_assert_eq!(compute_stats(&shuffled).unwrap(), base.clone());
        prop_assert!(base.n_later_causal <= base.n_self_causal + base.n_non_self_causal);
        prop_assert_eq!(base.relative_position_histogram.values().sum::<usize>(), base.n_pairs);
        prop_assert_eq!(base.emotion_histogram.values().sum::<usize>(), base.n_utterances);
    }
}
