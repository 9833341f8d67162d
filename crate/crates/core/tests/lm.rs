mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use stylegraft::lm::{LmConfig, LmError, TrigramModel, BOS, EOS, UNK};

fn padded(s: &[String]) -> Vec<String> {
    let mut p = vec![BOS.to_string(), BOS.to_string()];
    p.extend(s.iter().cloned());
    p.push(EOS.to_string());
    p
}

#[test]
fn counts_match_a_recount_of_the_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus = random_corpus(&mut rng, 100, 15, 9);
    let lm = TrigramModel::train(&corpus, LmConfig::default()).unwrap();
    let (mut c3, mut c2, mut c1) = (HashMap::new(), HashMap::new(), HashMap::new());
    for s in &corpus {
        let p = padded(s);
        for i in 2..p.len() {
            *c3.entry((p[i - 2].clone(), p[i - 1].clone(), p[i].clone())).or_insert(0u64) += 1;
            *c2.entry((p[i - 1].clone(), p[i].clone())).or_insert(0u64) += 1;
            *c1.entry(p[i].clone()).or_insert(0u64) += 1;
        }
    }
    for ((u, v, w), n) in &c3 {
        assert_eq!(lm.trigram_count(u, v, w), *n, "{u} {v} {w}");
    }
    for ((v, w), n) in &c2 {
        assert_eq!(lm.bigram_count(v, w), *n, "{v} {w}");
    }
    for (w, n) in &c1 {
        assert_eq!(lm.unigram_count(w), *n, "{w}");
    }
    assert_eq!(lm.unigram_count(BOS), 0);
    assert_eq!(lm.trigram_count("w1", "w2", "never"), 0);
    let distinct = c1.len() - 1; // minus </s>
    assert_eq!(lm.scored_vocab_size(), distinct + 2); // plus </s> and <unk>
}

#[test]
fn sentence_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let corpus = random_corpus(&mut rng, 60, 12, 8);
    let mut shuffled = corpus.clone();
    shuffled.shuffle(&mut rng);
    let a = TrigramModel::train(&corpus, LmConfig::default()).unwrap();
    let b = TrigramModel::train(&shuffled, LmConfig::default()).unwrap();
    let probe = random_corpus(&mut rng, 20, 14, 8);
    for s in &probe {
        assert_eq!(a.log_prob::<f64, _>(s), b.log_prob::<f64, _>(s));
    }
}

#[test]
fn rare_words_fold_into_unk() {
    let corpus = vec![words("a dog runs"), words("a dog sleeps"), words("a cat")];
    let cfg = LmConfig {
        unk_threshold: 2,
        ..LmConfig::default()
    };
    let lm = TrigramModel::train(&corpus, cfg).unwrap();
    assert!(lm.vocab().iter().any(|w| w == "dog"));
    assert!(!lm.vocab().iter().any(|w| w == "cat"));
    assert_eq!(lm.unigram_count(UNK), 3);
    let hand = HandLm::train(&corpus, cfg.lambda, 2);
    for probe in [words("a cat"), words("a zebra runs"), words("dog dog")] {
        let got: f64 = lm.perplexity(&[probe.clone()]).unwrap();
        let want = hand.perplexity(&[probe.clone()]);
        assert!((got - want).abs() <= 1e-9 * want, "{probe:?}: {got} vs {want}");
    }
    // Unseen words and <unk> itself score the same.
    assert_eq!(lm.log_prob::<f64, _>(&words("a zebra")), lm.log_prob::<f64, _>(&words("a <unk>")));
}

#[test]
fn invalid_configurations_and_inputs() {
    let corpus = vec![words("a b")];
    for lambda in [[0.5, 0.5, 0.5], [1.2, -0.1, -0.1], [f64::NAN, 0.5, 0.5]] {
        let cfg = LmConfig { lambda, ..LmConfig::default() };
        assert!(matches!(TrigramModel::train(&corpus, cfg), Err(LmError::BadLambda(_))));
    }
    let empty: Vec<Vec<String>> = vec![vec![], vec![]];
    assert!(matches!(TrigramModel::train(&empty, LmConfig::default()), Err(LmError::EmptyCorpus)));
    let lm = TrigramModel::train(&corpus, LmConfig::default()).unwrap();
    let none: Vec<Vec<String>> = vec![];
    assert!(matches!(lm.perplexity::<f64, String, _>(&none), Err(LmError::EmptyInput)));
    // An empty sentence still scores its end marker.
    let p: f64 = lm.perplexity(&[Vec::<String>::new()]).unwrap();
    assert!(p.is_finite() && p > 1.0);
    assert!(lm.with_lambda([0.0, 0.0, 1.0]).is_ok());
    assert!(lm.with_lambda([0.0, 0.0, 0.9]).is_err());
}

#[test]
fn model_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus = random_corpus(&mut rng, 40, 10, 7);
    let lm = TrigramModel::train(&corpus, LmConfig { lambda: [0.5, 0.25, 0.25], unk_threshold: 2 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("humor.json");
    lm.save(&path).unwrap();
    let back = TrigramModel::load(&path).unwrap();
    assert_eq!(back.config(), lm.config());
    for s in random_corpus(&mut rng, 10, 12, 7) {
        assert_eq!(back.log_prob::<f64, _>(&s), lm.log_prob::<f64, _>(&s));
    }
    assert_eq!(back.to_json(), lm.to_json());

    let json = lm.to_json();
    assert!(matches!(TrigramModel::from_json("{}"), Err(LmError::Format(_))));
    let wrong = json.replacen("stylegraft-trigram", "arpa", 1);
    assert!(matches!(TrigramModel::from_json(&wrong), Err(LmError::Format(_))));
    let bad_lambda = json.replacen("\"lambda\":[0.5,0.25,0.25]", "\"lambda\":[0.5,0.5,0.5]", 1);
    assert_ne!(bad_lambda, json);
    assert!(matches!(TrigramModel::from_json(&bad_lambda), Err(LmError::BadLambda(_))));
}

#[test]
fn single_precision_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let corpus = random_corpus(&mut rng, 50, 10, 8);
    let lm = TrigramModel::train(&corpus, LmConfig::default()).unwrap();
    let probe = random_corpus(&mut rng, 10, 12, 8);
    let d: f64 = lm.perplexity(&probe).unwrap();
    let s: f32 = lm.perplexity(&probe).unwrap();
    assert!(((s as f64) - d).abs() / d < 1e-4, "{s} vs {d}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perplexity_matches_the_hand_model(
        seed in any::<u64>(),
        l3 in 0u32..=10,
        l2 in 0u32..=10,
        unk in 1u64..3,
    ) {
        prop_assume!(l3 + l2 < 10);
        let lambda = [l3 as f64 / 10.0, l2 as f64 / 10.0, (10 - l3 - l2) as f64 / 10.0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(&mut rng, 25, 8, 6);
        let probe = random_corpus(&mut rng, 6, 10, 6);
        let lm = TrigramModel::train(&corpus, LmConfig { lambda, unk_threshold: unk }).unwrap();
        let hand = HandLm::train(&corpus, lambda, unk);
        let got: f64 = lm.perplexity(&probe).unwrap();
        let want = hand.perplexity(&probe);
        prop_assert!((got - want).abs() <= 1e-9 * want, "{} vs {}", got, want);
    }

    #[test]
    fn memorized_corpus_has_unit_perplexity(seed in any::<u64>()) {
        // With all weight on trigrams, a corpus whose every trigram context
        // continues one way scores itself with probability one.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
        words.shuffle(&mut rng);
        let corpus = vec![words];
        let lm = TrigramModel::train(&corpus, LmConfig { lambda: [1.0, 0.0, 0.0], unk_threshold: 1 }).unwrap();
        let p: f64 = lm.perplexity(&corpus).unwrap();
        prop_assert!((p - 1.0).abs() < 1e-12);
    }
}
