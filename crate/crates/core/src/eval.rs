//! Corpus BLEU-4, paired bootstrap resampling and adversarial evaluation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MultiSourceExample, Vocabulary};
use crate::decoding::{translate_all, SearchConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::scalar::Scalar;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Fraction of reference positions whose token the hypothesis repeats at
    /// the same index.
    pub token_accuracy: f64,
    pub p_value: Option<f64>,
}

/// Clipped n-gram matches and hypothesis n-gram totals for one sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Stats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
    same_pos: usize,
}

impl std::ops::AddAssign for Stats {
    fn add_assign(&mut self, o: Stats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        self.same_pos += o.same_pos;
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_default() += 1;
    }
    m
}

fn sentence_stats(hyp: &str, reference: &str) -> Stats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut s = Stats { hyp_len: h.len(), ref_len: r.len(), ..Stats::default() };
    for n in 1..=MAX_ORDER {
        let rc = ngram_counts(&r, n);
        s.totals[n - 1] = h.len().saturating_sub(n - 1);
        s.matches[n - 1] = ngram_counts(&h, n).iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    }
    s.same_pos = h.iter().zip(&r).filter(|(a, b)| a == b).count();
    s
}

fn score(s: &Stats, smooth: bool) -> EvalReport {
    let mut precisions = [0.0; MAX_ORDER];
    for (n, p) in precisions.iter_mut().enumerate() {
        let (m, t) = (s.matches[n] as f64, s.totals[n] as f64);
        *p = if smooth && n > 0 {
            (m + 1.0) / (t + 1.0)
        } else if t > 0.0 {
            m / t
        } else {
            0.0
        };
    }
    let bp = if s.hyp_len == 0 {
        0.0
    } else if s.hyp_len >= s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        100.0 * bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    EvalReport {
        bleu,
        precisions,
        bp,
        hyp_len: s.hyp_len,
        ref_len: s.ref_len,
        token_accuracy: if s.ref_len == 0 { 0.0 } else { s.same_pos as f64 / s.ref_len as f64 },
        p_value: None,
    }
}

fn corpus_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<Vec<Stats>> {
    if hyps.len() != refs.len() {
        return Err(Error::Corpus(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::Corpus("empty reference corpus".into()));
    }
    if let Some(i) = refs.iter().position(|r| r.as_ref().split_whitespace().next().is_none()) {
        return Err(Error::Corpus(format!("reference line {} is empty", i + 1)));
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref())).collect())
}

/// Corpus-level BLEU-4 over whitespace tokens with clipped counts and the
/// exponential brevity penalty. A zero precision makes the score 0 unless
/// `smooth` adds one to the counts of orders 2 to 4.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], smooth: bool) -> Result<EvalReport> {
    let mut total = Stats::default();
    for s in corpus_stats(hyps, refs)? {
        total += s;
    }
    Ok(score(&total, smooth))
}

/// Fraction of bootstrap resamples of sentence indices in which system `a`
/// scores no higher than `b`, ties counting one half. Small values favor `a`.
pub fn paired_bootstrap<H: AsRef<str>, R: AsRef<str>>(
    a: &[H],
    b: &[H],
    refs: &[R],
    samples: usize,
    seed: u64,
    smooth: bool,
) -> Result<f64> {
    if samples < 100 {
        return Err(Error::Config(format!("paired bootstrap needs at least 100 samples, got {samples}")));
    }
    let sa = corpus_stats(a, refs)?;
    let sb = corpus_stats(b, refs)?;
    let n = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0.0;
    for _ in 0..samples {
        let (mut ta, mut tb) = (Stats::default(), Stats::default());
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            ta += sa[i];
            tb += sb[i];
        }
        let (x, y) = (score(&ta, smooth).bleu, score(&tb, smooth).bleu);
        not_better += if x < y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        };
    }
    Ok(not_better / samples as f64)
}

/// Copies of `examples` whose source `which` (1-based) comes from another
/// example drawn uniformly. With `allow_self` the draw includes the
/// example itself.
pub fn replace_source(
    examples: &[MultiSourceExample],
    which: usize,
    seed: u64,
    allow_self: bool,
) -> Result<Vec<MultiSourceExample>> {
    let k = examples.first().map_or(0, |e| e.sources.len());
    if which == 0 || which > k {
        return Err(Error::Config(format!("source index {which} outside 1..={k}")));
    }
    let n = examples.len();
    if n < 2 && !allow_self {
        return Err(Error::Corpus("adversarial evaluation needs at least two examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let j = if allow_self {
                rng.gen_range(0..n)
            } else {
                let j = rng.gen_range(0..n - 1);
                j + (j >= i) as usize
            };
            let mut out = e.clone();
            out.sources[which - 1] = examples[j].sources[which - 1].clone();
            out
        })
        .collect())
}

/// Beam-decodes every example and scores the detokenized outputs against
/// the targets. Returns the report and the hypotheses.
pub fn evaluate_model<T: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    vocab: &Vocabulary,
    examples: &[MultiSourceExample],
    search: &SearchConfig,
    smooth: bool,
) -> Result<(EvalReport, Vec<String>)> {
    let sources: Vec<Vec<Vec<u32>>> = examples.iter().map(|e| e.sources.clone()).collect();
    let hyps: Vec<String> =
        translate_all(cfg, params, &sources, search)?.iter().map(|h| vocab.decode(h.content())).collect();
    let refs: Vec<String> = examples.iter().map(|e| vocab.decode_target(&e.target)).collect();
    Ok((corpus_bleu(&hyps, &refs, smooth)?, hyps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialReport {
    pub normal: EvalReport,
    pub randomized: EvalReport,
    /// `normal.bleu - randomized.bleu`
    pub delta: f64,
}

/// Scores the model on `examples` as given and with source `which`
/// (1-based) replaced by another example's.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_eval<T: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    vocab: &Vocabulary,
    examples: &[MultiSourceExample],
    which: usize,
    seed: u64,
    search: &SearchConfig,
    smooth: bool,
) -> Result<AdversarialReport> {
    let swapped = replace_source(examples, which, seed, false)?;
    let (normal, _) = evaluate_model(cfg, params, vocab, examples, search, smooth)?;
    let (randomized, _) = evaluate_model(cfg, params, vocab, &swapped, search, smooth)?;
    Ok(AdversarialReport { delta: normal.bleu - randomized.bleu, normal, randomized })
}
