use msgen::corpus::{MultiSourceExample, Vocabulary};
use msgen::decoding::SearchConfig;
use msgen::eval::*;
use msgen::model::{ModelConfig, Parameters};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bleu(h: &[&str], r: &[&str], smooth: bool) -> f64 {
    corpus_bleu(h, r, smooth).unwrap().bleu
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 5e-5, "{a} vs {b}");
}

// Expected values were computed by hand from explicit n-gram counts.

#[test]
fn identical_corpus_scores_100() {
    let refs = ["a b c d e", "f g h i j k"];
    close(bleu(&refs, &refs, false), 100.0);
}

#[test]
fn disjoint_corpus_scores_0() {
    close(bleu(&["p q r s t"], &["a b c d e"], false), 0.0);
    close(bleu(&["p q r s t"], &["a b c d e"], true), 0.0);
}

#[test]
fn short_hypothesis_fixture() {
    close(bleu(&["the cat sat"], &["the cat sat down"], false), 0.0);
    close(bleu(&["the cat sat"], &["the cat sat down"], true), 71.6531);
}

#[test]
fn two_sentence_fixture() {
    let r = corpus_bleu(&["a b c d e", "x y z w"], &["a b c d f", "x y z w"], false).unwrap();
    close(r.bleu, 79.8408);
    let expect = [8.0 / 9.0, 6.0 / 7.0, 4.0 / 5.0, 2.0 / 3.0];
    for (p, e) in r.precisions.iter().zip(expect) {
        close(*p, e);
    }
    close(r.bp, 1.0);
}

#[test]
fn clipped_counts_fixture() {
    let (h, r) = (["the cat the cat on the mat"], ["the cat is on the mat"]);
    let plain = corpus_bleu(&h, &r, false).unwrap();
    let expect = [5.0 / 7.0, 3.0 / 6.0, 1.0 / 5.0, 0.0];
    for (p, e) in plain.precisions.iter().zip(expect) {
        close(*p, e);
    }
    close(plain.bleu, 0.0);
    close(bleu(&h, &r, true), 40.6149);
}

#[test]
fn brevity_penalty_fixture() {
    let r = corpus_bleu(&["a b c"], &["a b c d e f"], true).unwrap();
    close(r.bp, (-1.0f64).exp());
    close(r.bleu, 36.7879);
}

#[test]
fn malformed_corpora_are_rejected() {
    assert!(corpus_bleu(&["a"], &["a", "b"], false).is_err());
    assert!(corpus_bleu::<&str, &str>(&[], &[], false).is_err());
    assert!(corpus_bleu(&["a"], &["  "], false).is_err());
    // an empty hypothesis is legal and scores 0
    close(bleu(&[""], &["a b"], true), 0.0);
}

/// Direct BLEU from per-order counts, summed over the corpus.
fn oracle(h: &[Vec<u8>], r: &[Vec<u8>]) -> f64 {
    let (mut m, mut t) = ([0f64; 4], [0f64; 4]);
    for (h, r) in h.iter().zip(r) {
        for n in 1..=4 {
            let grams = |s: &[u8]| s.windows(n).map(|w| w.to_vec()).collect::<Vec<_>>();
            let mut rg = grams(r);
            for g in grams(h) {
                t[n - 1] += 1.0;
                if let Some(i) = rg.iter().position(|x| *x == g) {
                    rg.swap_remove(i);
                    m[n - 1] += 1.0;
                }
            }
        }
    }
    let c: usize = h.iter().map(Vec::len).sum();
    let rl: usize = r.iter().map(Vec::len).sum();
    if m.contains(&0.0) {
        return 0.0;
    }
    let bp = if c >= rl { 1.0 } else { (1.0 - rl as f64 / c as f64).exp() };
    100.0 * bp * (0..4).map(|n| (m[n] / t[n]).ln() / 4.0).sum::<f64>().exp()
}

fn text(s: &[u8]) -> String {
    s.iter().map(|c| format!("w{c}")).collect::<Vec<_>>().join(" ")
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    prop::collection::vec((prop::collection::vec(0u8..4, 0..9), prop::collection::vec(0u8..4, 1..9)), 1..6)
}

proptest! {
    #[test]
    fn references_score_100_against_themselves(c in corpus()) {
        let refs: Vec<String> = c.iter().map(|(_, r)| text(r)).collect();
        // precisions need at least one 4-gram
        prop_assume!(c.iter().any(|(_, r)| r.len() >= 4));
        prop_assert!((corpus_bleu(&refs, &refs, false).unwrap().bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn score_ignores_line_order(c in corpus(), rot in 0usize..6) {
        let hyps: Vec<String> = c.iter().map(|(h, _)| text(h)).collect();
        let refs: Vec<String> = c.iter().map(|(_, r)| text(r)).collect();
        let k = rot % c.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        for smooth in [false, true] {
            prop_assert_eq!(corpus_bleu(&hyps, &refs, smooth).unwrap(), corpus_bleu(&h2, &r2, smooth).unwrap());
        }
    }

    #[test]
    fn matches_direct_counting(c in corpus()) {
        let (h, r): (Vec<Vec<u8>>, Vec<Vec<u8>>) = c.iter().cloned().unzip();
        let hyps: Vec<String> = h.iter().map(|x| text(x)).collect();
        let refs: Vec<String> = r.iter().map(|x| text(x)).collect();
        let rep = corpus_bleu(&hyps, &refs, false).unwrap();
        prop_assert!((0.0..=100.0).contains(&rep.bleu));
        prop_assert!((rep.bleu - oracle(&h, &r)).abs() < 1e-9);
        if rep.precisions.iter().all(|&p| p > 0.0) {
            let geo = (rep.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
            prop_assert!((rep.bleu - 100.0 * rep.bp * geo).abs() < 1e-9);
        }
    }
}

fn noisy(refs: &[String], rate: f64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refs.iter()
        .map(|r| r.split_whitespace().map(|w| if rng.gen_bool(rate) { "zz" } else { w }).collect::<Vec<_>>().join(" "))
        .collect()
}

fn random_refs(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..rng.gen_range(5..12)).map(|_| format!("w{}", rng.gen_range(0..20))).collect::<Vec<_>>().join(" "))
        .collect()
}

#[test]
fn bootstrap_of_a_system_against_itself_is_even() {
    let refs = random_refs(200, 1);
    let a = noisy(&refs, 0.3, 2);
    let p = paired_bootstrap(&a, &a, &refs, 1000, 3, false).unwrap();
    assert!((0.4..=0.6).contains(&p), "p = {p}");
}

#[test]
fn bootstrap_detects_a_dominating_system() {
    let refs = random_refs(200, 1);
    let good = noisy(&refs, 0.1, 2);
    let bad = noisy(&refs, 0.4, 3);
    assert!(paired_bootstrap(&good, &bad, &refs, 1000, 4, false).unwrap() < 0.01);
    assert!(paired_bootstrap(&bad, &good, &refs, 1000, 4, false).unwrap() > 0.99);
}

#[test]
fn bootstrap_is_seeded_and_checks_sample_count() {
    let refs = random_refs(50, 5);
    let a = noisy(&refs, 0.2, 6);
    let b = noisy(&refs, 0.25, 7);
    assert_eq!(
        paired_bootstrap(&a, &b, &refs, 300, 9, true).unwrap(),
        paired_bootstrap(&a, &b, &refs, 300, 9, true).unwrap()
    );
    assert!(paired_bootstrap(&a, &b, &refs, 99, 9, true).is_err());
}

// ---------------------------------------------------------------- adversarial

fn fixture() -> (ModelConfig, Parameters<f32>, Vocabulary, Vec<MultiSourceExample>) {
    let words: String = (0..12).map(|i| format!("a{i} b{i} t{i} ")).collect();
    let vocab = Vocabulary::build([words.as_str()], 2).unwrap();
    let cfg = ModelConfig { vocab_size: vocab.len(), ..ModelConfig::micro() };
    let params = Parameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let examples = (0..8)
        .map(|_| {
            let mut src = |tag: u32| -> Vec<u32> {
                std::iter::once(tag)
                    .chain((0..rng.gen_range(2..5)).map(|_| rng.gen_range(7..vocab.len() as u32)))
                    .collect()
            };
            let sources = vec![src(5), src(6)];
            let mut target = vec![1];
            target.extend(&sources[0][1..]);
            target.push(2);
            MultiSourceExample { sources, target }
        })
        .collect();
    (cfg, params, vocab, examples)
}

#[test]
fn replacement_draws_other_examples() {
    let (_, _, _, ex) = fixture();
    for which in 1..=2 {
        let out = replace_source(&ex, which, 11, false).unwrap();
        for (i, (a, b)) in ex.iter().zip(&out).enumerate() {
            assert_eq!(a.target, b.target);
            assert_eq!(a.sources[2 - which], b.sources[2 - which]);
            let from = ex.iter().position(|e| e.sources[which - 1] == b.sources[which - 1]).unwrap();
            assert!(from != i || ex.iter().filter(|e| e.sources[which - 1] == a.sources[which - 1]).count() > 1);
        }
        assert_eq!(out, replace_source(&ex, which, 11, false).unwrap());
    }
    assert!(replace_source(&ex, 0, 1, false).is_err());
    assert!(replace_source(&ex, 3, 1, false).is_err());
    assert!(replace_source(&ex[..1], 1, 1, false).is_err());
}

#[test]
fn self_replacement_on_one_example_changes_nothing() {
    let (cfg, params, vocab, ex) = fixture();
    let one = &ex[..1];
    let swapped = replace_source(one, 2, 5, true).unwrap();
    assert_eq!(swapped, one);
    let search = SearchConfig { beam: 2, alpha: 0.6, max_len: 8 };
    assert_eq!(
        evaluate_model(&cfg, &params, &vocab, one, &search, true).unwrap(),
        evaluate_model(&cfg, &params, &vocab, &swapped, &search, true).unwrap()
    );
}

#[test]
fn adversarial_report_is_consistent() {
    let (cfg, params, vocab, ex) = fixture();
    let search = SearchConfig { beam: 2, alpha: 0.6, max_len: 8 };
    let rep = adversarial_eval(&cfg, &params, &vocab, &ex, 2, 7, &search, true).unwrap();
    assert_eq!(rep.normal, evaluate_model(&cfg, &params, &vocab, &ex, &search, true).unwrap().0);
    let swapped = replace_source(&ex, 2, 7, false).unwrap();
    assert_eq!(rep.randomized, evaluate_model(&cfg, &params, &vocab, &swapped, &search, true).unwrap().0);
    assert_eq!(rep.delta, rep.normal.bleu - rep.randomized.bleu);
    assert_eq!(rep, adversarial_eval(&cfg, &params, &vocab, &ex, 2, 7, &search, true).unwrap());
    assert!(adversarial_eval(&cfg, &params, &vocab, &ex, 3, 7, &search, true).is_err());
}
