use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use super::synth::TextExample;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{PaddedSeqs, SourceBatch};
use crate::special::MASK;

/// K encoded sources (each led by its language tag) and a target `bos … eos`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiSourceExample {
    pub sources: Vec<Vec<u32>>,
    pub target: Vec<u32>,
}

impl MultiSourceExample {
    pub fn encode(vocab: &Vocabulary, ex: &TextExample) -> Self {
        MultiSourceExample {
            sources: ex.sources.iter().map(|s| vocab.encode(s)).collect(),
            target: vocab.encode_target(&ex.target),
        }
    }

    /// Token count once padded to the given per-source and target widths.
    fn cost(&self) -> usize {
        self.sources.iter().map(Vec::len).sum::<usize>() + self.target.len()
    }

    pub fn validate(&self, sources: usize, max_len: usize) -> Result<()> {
        if self.sources.len() != sources {
            return Err(Error::Corpus(format!("expected {sources} sources, got {}", self.sources.len())));
        }
        for s in self.sources.iter().chain(std::iter::once(&self.target)) {
            if s.is_empty() {
                return Err(Error::Corpus("empty sequence".into()));
            }
            if s.len() > max_len {
                return Err(Error::Length { len: s.len(), limit: max_len });
            }
        }
        Ok(())
    }
}

/// Uniformly chosen single source paired with the unchanged target.
pub fn sample_single_source(example: &MultiSourceExample, rng: &mut impl Rng) -> MultiSourceExample {
    let k = rng.gen_range(0..example.sources.len());
    MultiSourceExample { sources: vec![example.sources[k].clone()], target: example.target.clone() }
}

/// Masks contiguous spans covering `round(ratio · n)` of the `n`
/// corruptible tokens and collapses each maximal masked run into one mask
/// id. Ids below `first_regular` (specials and language tags) are never
/// touched. Span lengths are geometric with mean 3.
pub fn corrupt_for_denoising(sentence: &[u32], ratio: f64, first_regular: u32, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_with(sentence, ratio, first_regular, &mut rng)
}

pub fn corrupt_with(sentence: &[u32], ratio: f64, first_regular: u32, rng: &mut impl Rng) -> Vec<u32> {
    assert!((0.0..1.0).contains(&ratio), "corruption ratio {ratio} outside [0, 1)");
    let open: Vec<bool> = sentence.iter().map(|&t| t >= first_regular).collect();
    let n = open.iter().filter(|&&o| o).count();
    let goal = (ratio * n as f64).round() as usize;
    if goal == 0 {
        return sentence.to_vec();
    }
    // number of failures before the first success, shifted to start at 1
    let spans = Geometric::new(1.0 / 3.0).expect("valid probability");
    let mut masked = vec![false; sentence.len()];
    let mut count = 0;
    while count < goal {
        let len = (spans.sample(rng) as usize + 1).min(goal - count);
        let starts: Vec<usize> = (0..sentence.len()).filter(|&i| open[i] && !masked[i]).collect();
        let mut i = *starts.choose(rng).expect("fewer masked tokens than the goal");
        let mut left = len;
        while left > 0 && i < sentence.len() && open[i] && !masked[i] {
            masked[i] = true;
            count += 1;
            left -= 1;
            i += 1;
        }
    }
    let mut out = Vec::with_capacity(sentence.len());
    for (i, &t) in sentence.iter().enumerate() {
        if !masked[i] {
            out.push(t);
        } else if i == 0 || !masked[i - 1] {
            out.push(MASK);
        }
    }
    out
}

/// Pads a group of examples into model inputs. Fails when the padded token
/// count exceeds `max_tokens`.
pub fn make_batch(examples: &[&MultiSourceExample], max_tokens: usize) -> Result<(SourceBatch, PaddedSeqs)> {
    let first = examples.first().ok_or_else(|| Error::Batch("no examples".into()))?;
    let k = first.sources.len();
    let src: Vec<Vec<&[u32]>> = examples.iter().map(|e| e.sources.iter().map(Vec::as_slice).collect()).collect();
    let sources = SourceBatch::from_examples(&src)?;
    if sources.num_sources() != k {
        return Err(Error::Batch("examples disagree on source count".into()));
    }
    let targets = PaddedSeqs::new(&examples.iter().map(|e| e.target.as_slice()).collect::<Vec<_>>())?;
    let tokens = padded_tokens(&sources, &targets);
    if tokens > max_tokens {
        return Err(Error::Batch(format!("{tokens} padded tokens exceed the limit of {max_tokens}")));
    }
    Ok((sources, targets))
}

pub fn padded_tokens(sources: &SourceBatch, targets: &PaddedSeqs) -> usize {
    sources.batch() * (sources.sources.iter().map(PaddedSeqs::width).sum::<usize>() + targets.width())
}

/// Groups example indices into batches whose padded token count stays
/// within `max_tokens`. Examples are bucketed by length so padding stays
/// small, then batch order is shuffled with `rng`.
pub fn pack_batches(examples: &[MultiSourceExample], max_tokens: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| {
        let e = &examples[i];
        (e.target.len(), e.sources.iter().map(Vec::len).collect::<Vec<_>>())
    });
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widths: Vec<usize> = Vec::new();
    for i in order {
        let e = &examples[i];
        if e.cost() > max_tokens {
            return Err(Error::Batch(format!("example of {} tokens exceeds the limit of {max_tokens}", e.cost())));
        }
        let mut w: Vec<usize> = e.sources.iter().map(Vec::len).chain(std::iter::once(e.target.len())).collect();
        if !current.is_empty() {
            for (a, b) in w.iter_mut().zip(&widths) {
                *a = (*a).max(*b);
            }
            if (current.len() + 1) * w.iter().sum::<usize>() > max_tokens {
                batches.push(std::mem::take(&mut current));
                w = e.sources.iter().map(Vec::len).chain(std::iter::once(e.target.len())).collect();
            }
        }
        current.push(i);
        widths = w;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Reads a tab-separated corpus file, requiring `arity` fields per line.
pub fn read_fields(path: impl AsRef<Path>, arity: usize) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
            if fields.len() != arity {
                return Err(Error::Corpus(format!(
                    "{}:{}: expected {arity} fields, found {}",
                    path.display(),
                    n + 1,
                    fields.len()
                )));
            }
            Ok(fields)
        })
        .collect()
}

pub fn write_fields<S: AsRef<str>>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = Vec<S>>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for row in rows {
        let parts: Vec<&str> = row.iter().map(AsRef::as_ref).collect();
        out.push_str(&parts.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `K + 1`-field multi-source file as text examples.
pub fn read_multi(path: impl AsRef<Path>, sources: usize) -> Result<Vec<TextExample>> {
    Ok(read_fields(path, sources + 1)?
        .into_iter()
        .map(|mut f| {
            let target = f.pop().unwrap();
            TextExample { sources: f, target }
        })
        .collect())
}

pub fn write_multi(path: impl AsRef<Path>, examples: &[TextExample]) -> Result<()> {
    write_fields(
        path,
        examples.iter().map(|e| e.sources.iter().map(String::as_str).chain([e.target.as_str()]).collect::<Vec<_>>()),
    )
}
