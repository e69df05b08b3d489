use easynlp_core::tokenization::{
    apply_mlm_masking, build_vocab, encode, is_special, EntityMatcher, TokenSequence, IGNORE_INDEX,
};
use proptest::prelude::*;
use serde_json::Value;

fn golden() -> Value {
    let text = include_str!("golden/mlm_seed42.json");
    serde_json::from_str(text).unwrap()
}

fn as_vec<T: TryFrom<i64>>(v: &Value) -> Vec<T>
where
    T::Error: std::fmt::Debug,
{
    v.as_array().unwrap().iter().map(|x| T::try_from(x.as_i64().unwrap()).unwrap()).collect()
}

#[test]
fn masking_matches_golden_seed_42() {
    let g = golden();
    let seq = TokenSequence {
        ids: as_vec::<u32>(&g["input"]),
        ..Default::default()
    };
    let vocab_size = g["vocab_size"].as_u64().unwrap() as usize;
    let (ids, labels) = apply_mlm_masking(&seq, vocab_size, g["mask_prob"].as_f64().unwrap(), 42);
    assert_eq!(ids, as_vec::<u32>(&g["masked"]));
    assert_eq!(labels, as_vec::<i64>(&g["labels"]));
}

#[test]
fn mask_fraction_over_ten_thousand_tokens() {
    let seq = TokenSequence {
        ids: (0..10_000u32).map(|i| 5 + i % 50).collect(),
        ..Default::default()
    };
    for (seed, p) in [(1u64, 0.15), (2, 0.5), (3, 0.05)] {
        let (_, labels) = apply_mlm_masking(&seq, 55, p, seed);
        let frac = labels.iter().filter(|&&l| l != IGNORE_INDEX).count() as f64 / 10_000.0;
        assert!((frac - p).abs() <= 0.02, "p={p} got {frac}");
    }
}

proptest! {
    #[test]
    fn masking_never_touches_specials_and_labels_originals(
        body in prop::collection::vec(5u32..40, 0..60),
        p in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut ids = vec![2];
        ids.extend(&body);
        ids.push(3);
        let seq = TokenSequence { ids: ids.clone(), ..Default::default() };
        let (masked, labels) = apply_mlm_masking(&seq, 40, p, seed);
        prop_assert_eq!(masked.len(), ids.len());
        for i in 0..ids.len() {
            if is_special(ids[i]) {
                prop_assert_eq!(masked[i], ids[i]);
                prop_assert_eq!(labels[i], IGNORE_INDEX);
            } else if labels[i] == IGNORE_INDEX {
                prop_assert_eq!(masked[i], ids[i]);
            } else {
                prop_assert_eq!(labels[i], ids[i] as i64);
            }
        }
        let again = apply_mlm_masking(&seq, 40, p, seed);
        prop_assert_eq!(again, (masked, labels));
    }

    #[test]
    fn decode_recovers_lowercased_tokens(words in prop::collection::vec("[a-zA-Z]{1,6}", 1..12)) {
        let text = words.join(" ");
        let vocab = build_vocab(&[text.as_str()], 1).unwrap();
        let seq = encode(&vocab, &text, 64);
        let lowered: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        prop_assert_eq!(vocab.decode(&seq.ids), lowered);
    }

    #[test]
    fn spans_survive_truncation(
        words in prop::collection::vec(0usize..6, 1..30),
        max_len in 2usize..32,
    ) {
        let names = ["aa", "bb", "cc", "dd", "ee", "ff"];
        let text: Vec<&str> = words.iter().map(|&w| names[w]).collect();
        let text = text.join(" ");
        let vocab = build_vocab(&[text.as_str(), "aa bb cc dd ee ff"], 1).unwrap();
        let matcher = EntityMatcher::new(&vocab, ["aa bb", "cc", "dd ee ff"]);
        let mut seq = encode(&vocab, &text, 64);
        matcher.annotate(&mut seq);
        let before = seq.entity_spans.clone();
        seq.truncate(max_len);
        prop_assert!(seq.ids.len() <= max_len);
        prop_assert_eq!(*seq.ids.last().unwrap(), 3);
        let limit = seq.ids.len() - 1;
        let mut prev_end = 0;
        for s in &seq.entity_spans {
            prop_assert!(s.start >= 1 && s.start < s.end && s.end <= limit);
            prop_assert!(s.start >= prev_end);
            prev_end = s.end;
            prop_assert!(before.contains(s));
        }
        let kept = before.iter().filter(|s| s.end <= limit).count();
        prop_assert_eq!(kept, seq.entity_spans.len());
    }
}
