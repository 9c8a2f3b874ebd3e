//! Greedy and beam-search decoding with the `((5 + n) / 6)^alpha` length
//! penalty, over any [`StepScorer`].

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{Encoded, ModelConfig, Net, PaddedSeqs, Parameters, SourceBatch};
use crate::scalar::Scalar;
use crate::special::{BOS, EOS, PAD};
use crate::tape::Tape;
use crate::tensor::log_softmax;

/// Next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    fn eos(&self) -> u32 {
        EOS
    }

    /// Tokens that are never generated.
    fn banned(&self, token: u32) -> bool {
        token == PAD || token == BOS
    }

    /// One row of `vocab_size` log-probabilities per prefix. Prefixes hold
    /// generated tokens only; the scorer supplies any start symbol.
    fn next_logprobs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

/// Generated tokens (no bos; ends with eos when finished) and their
/// accumulated log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// `logprob / lp(n)` with `n` the generated length including eos.
    pub fn score(&self, alpha: f64) -> f64 {
        self.logprob / length_penalty(self.tokens.len(), alpha)
    }

    /// Tokens without the trailing eos.
    pub fn content(&self) -> &[u32] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

pub fn length_penalty(n: usize, alpha: f64) -> f64 {
    ((5.0 + n as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    pub alpha: f64,
    /// Longest full target, counting bos and eos.
    pub max_len: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { beam: 4, alpha: 0.6, max_len: 32 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("length penalty alpha {} outside [0, 1]", self.alpha)));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for bos and one token".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Finished hypotheses by score, then unfinished ones by score.
    pub nbest: Vec<Hypothesis>,
}

/// Final ranking: finished before unfinished, higher score, lower token
/// ids, shorter.
pub fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.finished
        .cmp(&a.finished)
        .then(b.score(alpha).total_cmp(&a.score(alpha)))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then(a.tokens.len().cmp(&b.tokens.len()))
}

fn argmax(row: &[f64], scorer: &impl StepScorer) -> Result<u32> {
    let mut best: Option<u32> = None;
    for (j, &x) in row.iter().enumerate() {
        let j = j as u32;
        if scorer.banned(j) {
            continue;
        }
        if best.is_none_or(|b| x > row[b as usize]) {
            best = Some(j);
        }
    }
    best.ok_or_else(|| Error::Contract("every token is banned".into()))
}

/// Highest-probability token at each step until eos or the length limit;
/// ties go to the lower id.
pub fn greedy_decode(scorer: &mut impl StepScorer, max_len: usize) -> Result<Hypothesis> {
    SearchConfig { beam: 1, alpha: 0.0, max_len }.validate()?;
    let eos = scorer.eos();
    let mut h = Hypothesis { tokens: Vec::new(), logprob: 0.0, finished: false };
    while h.tokens.len() + 1 < max_len {
        let row = scorer.next_logprobs(&[&h.tokens])?.remove(0);
        let t = argmax(&row, scorer)?;
        h.tokens.push(t);
        h.logprob += row[t as usize];
        if t == eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Beam search. Each step keeps the `beam` best one-token extensions by
/// log-probability (ties: lower token id, then earlier parent); eos
/// extensions among them move to the finished pool. Extensions still open
/// at the length limit are returned flagged unfinished. The greedy path is
/// always a final candidate, so a wider beam never ranks worse than beam 1.
pub fn beam_search(scorer: &mut impl StepScorer, search: &SearchConfig) -> Result<BeamOutput> {
    search.validate()?;
    let eos = scorer.eos();
    let mut live = vec![Hypothesis { tokens: Vec::new(), logprob: 0.0, finished: false }];
    let mut all: Vec<Hypothesis> = Vec::new();
    let mut length = 0;
    while !live.is_empty() && length + 1 < search.max_len {
        let prefixes: Vec<&[u32]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let rows = scorer.next_logprobs(&prefixes)?;
        let mut cands: Vec<(f64, u32, usize)> = Vec::new();
        for (p, row) in rows.iter().enumerate() {
            for (j, &lp) in row.iter().enumerate() {
                let j = j as u32;
                if !scorer.banned(j) {
                    cands.push((live[p].logprob + lp, j, p));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(logprob, t, p) in cands.iter().take(search.beam) {
            let mut tokens = live[p].tokens.clone();
            tokens.push(t);
            let h = Hypothesis { tokens, logprob, finished: t == eos };
            if h.finished {
                all.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        length += 1;
    }
    all.extend(live);
    if search.beam > 1 {
        all.push(greedy_decode(scorer, search.max_len)?);
    }
    all.sort_by(|a, b| rank(a, b, search.alpha));
    all.dedup_by(|a, b| a.tokens == b.tokens);
    Ok(BeamOutput { best: all[0].clone(), nbest: all })
}

/// Scores prefixes with a model whose encoder outputs are computed once.
pub struct ModelScorer<'c, T> {
    net: Net<'c, T>,
    enc: Encoded,
    mark: usize,
}

impl<'c, T: Scalar> ModelScorer<'c, T> {
    /// Encodes one example's sources.
    pub fn new(cfg: &'c ModelConfig, params: &Parameters<T>, sources: &[Vec<u32>]) -> Result<Self> {
        let mut net = Net::with_trainable(cfg, params, Tape::new(), |_| false)?;
        let enc = net.encode(&SourceBatch::from_examples(&[sources.to_vec()])?)?;
        let mark = net.tape.len();
        Ok(ModelScorer { net, enc, mark })
    }

    /// Logits of the last position of each prefix, as computed by the
    /// decoder on top of the cached encoding.
    pub fn next_logits(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<T>>> {
        self.net.tape.truncate(self.mark);
        let enc = if prefixes.len() == 1 {
            self.enc.clone()
        } else {
            self.net.expand(&self.enc, &vec![0; prefixes.len()])?
        };
        let inputs: Vec<Vec<u32>> =
            prefixes.iter().map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect()).collect();
        let inputs = PaddedSeqs::new(&inputs)?;
        let logits = self.net.decode(&enc, &inputs)?;
        let logits = self.net.tape.value(logits);
        let v = logits.cols();
        let width = inputs.width();
        Ok(inputs
            .lens()
            .iter()
            .enumerate()
            .map(|(b, &len)| logits.data()[(b * width + len - 1) * v..][..v].to_vec())
            .collect())
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.net.config().vocab_size
    }

    fn next_logprobs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .next_logits(prefixes)?
            .into_iter()
            .map(|row| log_softmax(&row).into_iter().map(|x| x.as_f64()).collect())
            .collect())
    }
}

/// `sum_j log P(y_j | x, y_<j)` of a full target `bos … eos` under
/// teacher forcing.
pub fn score_sequence<T: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    sources: &[Vec<u32>],
    target: &[u32],
) -> Result<f64> {
    if target.len() < 2 || target[0] != BOS || target[target.len() - 1] != EOS {
        return Err(Error::Contract("target must be bos … eos".into()));
    }
    let mut net = Net::with_trainable(cfg, params, Tape::new(), |_| false)?;
    let out = net.forward(&SourceBatch::from_examples(&[sources.to_vec()])?, &PaddedSeqs::new(&[target])?)?;
    Ok(net.token_logprobs(&out)[0].iter().sum())
}

/// Beam-decodes each example's sources in order.
pub fn translate_all<T: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    sources: &[Vec<Vec<u32>>],
    search: &SearchConfig,
) -> Result<Vec<Hypothesis>> {
    let search = SearchConfig { max_len: search.max_len.min(cfg.max_len + 1), ..*search };
    sources
        .iter()
        .map(|s| {
            let mut scorer = ModelScorer::new(cfg, params, s)?;
            Ok(beam_search(&mut scorer, &search)?.best)
        })
        .collect()
}
