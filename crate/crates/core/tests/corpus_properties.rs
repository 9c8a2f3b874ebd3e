use std::collections::HashMap;

use msgen::corpus::{
    corrupt_for_denoising, generate, make_batch, sample_single_source, MultiSourceExample, SynthSpec, Task, Vocabulary,
};
use msgen::model::{ModelConfig, Net, Parameters};
use msgen::special::MASK;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn corruption_covers_the_requested_fraction() {
    let sentence: Vec<u32> = (0..100).map(|i| 10 + i % 50).collect();
    let covered: usize = (0..100)
        .map(|seed| {
            let out = corrupt_for_denoising(&sentence, 0.3, 10, seed);
            sentence.len() - out.iter().filter(|&&t| t != MASK).count()
        })
        .sum();
    let mean = covered as f64 / 100.0;
    assert!((27.0..=33.0).contains(&mean), "mean covered {mean}");
}

#[test]
fn single_source_sampling_is_uniform() {
    let ex = MultiSourceExample { sources: vec![vec![5, 9], vec![6, 10]], target: vec![1, 11, 2] };
    let mut first = 0;
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_single_source(&ex, &mut rng);
        assert_eq!(s.target, ex.target);
        assert_eq!(s.sources.len(), 1);
        if s.sources[0] == ex.sources[0] {
            first += 1;
        }
    }
    assert!((4850..=5150).contains(&first), "source 1 chosen {first} times");
    let one = MultiSourceExample { sources: vec![vec![5, 9]], target: vec![1, 2] };
    assert_eq!(sample_single_source(&one, &mut ChaCha8Rng::seed_from_u64(0)), one);
}

/// Plug-in mutual information estimate (nats) between two discrete samples.
fn mutual_information(pairs: &[(String, String)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: HashMap<(&str, &str), f64> = HashMap::new();
    let mut left: HashMap<&str, f64> = HashMap::new();
    let mut right: HashMap<&str, f64> = HashMap::new();
    for (a, b) in pairs {
        *joint.entry((a, b)).or_default() += 1.0;
        *left.entry(a).or_default() += 1.0;
        *right.entry(b).or_default() += 1.0;
    }
    joint.iter().map(|(&(a, b), &c)| c / n * (c * n / (left[a] * right[b])).ln()).sum()
}

#[test]
fn even_target_positions_carry_no_information_about_source_two() {
    let spec = SynthSpec { train: 20_000, dev: 1, test: 1, pretrain_per_language: 1, ..SynthSpec::default() };
    let set = generate(&spec, 5).unwrap();
    let token = |s: &str, i: usize| s.split_whitespace().nth(i).unwrap().to_string();
    let with_two: Vec<(String, String)> =
        set.train.iter().map(|e| (token(&e.target, 0), token(&e.sources[1], 1))).collect();
    let with_one: Vec<(String, String)> =
        set.train.iter().map(|e| (token(&e.target, 0), token(&e.sources[0], 1))).collect();
    let mi_two = mutual_information(&with_two);
    let mi_one = mutual_information(&with_one);
    // plug-in bias is about (16 - 1)^2 / (2 n) = 0.0056 nats
    assert!(mi_two < 0.02, "I(target_0; source_2) = {mi_two}");
    assert!((mi_one - (16f64).ln()).abs() < 0.05, "I(target_0; source_1) = {mi_one}");
}

#[test]
fn vocabulary_rebuild_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate(&SynthSpec { train: 300, dev: 5, test: 5, pretrain_per_language: 5, ..SynthSpec::default() }, 1)
        .unwrap();
    let path = dir.path().join("train.tsv");
    msgen::corpus::write_multi(&path, &set.train).unwrap();
    let a = dir.path().join("a.vocab");
    let b = dir.path().join("b.vocab");
    Vocabulary::build_from_files(&[&path], 2).unwrap().save(&a).unwrap();
    Vocabulary::build_from_files(&[&path], 2).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn every_generated_split_is_well_formed() {
    for task in Task::ALL {
        let spec = SynthSpec { task, train: 100, dev: 5, test: 5, pretrain_per_language: 5, ..SynthSpec::default() };
        let set = generate(&spec, 3).unwrap();
        let texts: Vec<&str> = set.pretrain.iter().map(String::as_str).collect();
        let vocab =
            Vocabulary::build(texts.iter().copied().chain(set.train.iter().map(|e| e.target.as_str())), 2).unwrap();
        for e in &set.train {
            let m = MultiSourceExample::encode(&vocab, e);
            m.validate(2, 64).unwrap();
            for (k, s) in m.sources.iter().enumerate() {
                assert_eq!(s[0], msgen::special::tag_id(k + 1));
            }
        }
    }
}

#[test]
fn padded_batch_loss_is_token_weighted_mean_of_singles() {
    let cfg = ModelConfig { vocab_size: 30, ..ModelConfig::micro() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = Parameters::<f32>::init(&cfg, &mut rng).unwrap();
    let mut examples = Vec::new();
    for _ in 0..6 {
        let src = |rng: &mut ChaCha8Rng, tag: u32| {
            let n = rng.gen_range(1..6);
            std::iter::once(tag).chain((0..n).map(|_| rng.gen_range(7..30))).collect::<Vec<u32>>()
        };
        let n = rng.gen_range(1..7);
        let mut target = vec![1u32];
        target.extend((0..n).map(|_| rng.gen_range(7..30)));
        target.push(2);
        examples.push(MultiSourceExample { sources: vec![src(&mut rng, 5), src(&mut rng, 6)], target });
    }
    let loss = |ex: &[&MultiSourceExample]| {
        let (s, t) = make_batch(ex, 10_000).unwrap();
        let mut net = Net::new(&cfg, &params).unwrap();
        let out = net.forward(&s, &t).unwrap();
        net.tape.value(out.loss).data()[0] as f64
    };
    let refs: Vec<&MultiSourceExample> = examples.iter().collect();
    let batched = loss(&refs);
    let weights: Vec<f64> = examples.iter().map(|e| (e.target.len() - 1) as f64).collect();
    let weighted: f64 =
        examples.iter().zip(&weights).map(|(e, w)| w * loss(&[e])).sum::<f64>() / weights.iter().sum::<f64>();
    assert!((batched - weighted).abs() < 1e-5, "{batched} vs {weighted}");

    // with equal target lengths the token-weighted and plain means coincide
    let same: Vec<MultiSourceExample> = examples
        .iter()
        .map(|e| MultiSourceExample { sources: e.sources.clone(), target: vec![1, 9, 10, 11, 2] })
        .collect();
    let refs: Vec<&MultiSourceExample> = same.iter().collect();
    let plain: f64 = same.iter().map(|e| loss(&[e])).sum::<f64>() / same.len() as f64;
    assert!((loss(&refs) - plain).abs() < 1e-5);
}

proptest! {
    #[test]
    fn encode_decode_round_trips(words in prop::collection::vec("[a-e][0-9]", 1..12), ids in prop::collection::vec(0u32..20, 1..12)) {
        let text = words.join(" ");
        let mut corpus = String::new();
        for a in ['a', 'b', 'c', 'd', 'e'] {
            for d in 0..10 {
                corpus.push_str(&format!("{a}{d} "));
            }
        }
        let vocab = Vocabulary::build([corpus.as_str()], 2).unwrap();
        prop_assert_eq!(vocab.decode(&vocab.encode(&text)), text);
        let ids: Vec<u32> = ids.into_iter().filter(|&i| i != msgen::special::UNK).collect();
        prop_assert_eq!(vocab.encode(&vocab.decode(&ids)), ids);
    }

    #[test]
    fn corruption_is_pure_and_shrinking(len in 1usize..60, ratio in 0.0f64..0.9, seed in 0u64..1000) {
        let s: Vec<u32> = (0..len as u32).map(|i| 7 + i % 13).collect();
        let a = corrupt_for_denoising(&s, ratio, 7, seed);
        prop_assert_eq!(&a, &corrupt_for_denoising(&s, ratio, 7, seed));
        prop_assert!(a.len() <= s.len());
    }
}
