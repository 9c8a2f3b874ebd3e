//! Synthetic multi-source corpora over disjoint per-language alphabets.
//!
//! Source language `k` uses tokens `{letter_k}{i}` (`a0`, `a1`, … for the
//! first source, `b0`, … for the second) and every source sentence starts
//! with its tag `<Lk>`. Targets use `t0`, `t1`, ….

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::parse_value;
use crate::special::tag_token;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Equal-length sources; target interleaves `f_1(x_1)` and `f_2(x_2)`
    /// token by token, so no single source determines it.
    ComplementaryHalves,
    /// Source 2 is a translation of source 1 with 30% of its tokens
    /// replaced at random; the target depends only on source 1.
    NoisyDuplicate,
    /// Target copies source 1.
    TaggedCopy,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ComplementaryHalves, Task::NoisyDuplicate, Task::TaggedCopy];

    pub fn name(self) -> &'static str {
        match self {
            Task::ComplementaryHalves => "complementary-halves",
            Task::NoisyDuplicate => "noisy-duplicate",
            Task::TaggedCopy => "tagged-copy",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::Corpus(format!("unknown task `{s}`")))
    }
}

/// Generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: Task,
    pub sources: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Unlabeled sentences per language (each source language and the
    /// target language).
    pub pretrain_per_language: usize,
    /// Content tokens per source sentence, inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: Task::ComplementaryHalves,
            sources: 2,
            train: 50_000,
            dev: 500,
            test: 500,
            pretrain_per_language: 10_000,
            min_len: 3,
            max_len: 7,
            alphabet: 16,
            noise: 0.3,
        }
    }
}

impl SynthSpec {
    /// Overrides fields named in `pairs`; other keys are ignored.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, v) in pairs {
            match key.as_str() {
                "task" => self.task = v.parse()?,
                "sources" => self.sources = parse_value(key, v)?,
                "train" => self.train = parse_value(key, v)?,
                "dev" => self.dev = parse_value(key, v)?,
                "test" => self.test = parse_value(key, v)?,
                "pretrain_per_language" => self.pretrain_per_language = parse_value(key, v)?,
                "min_len" => self.min_len = parse_value(key, v)?,
                "max_len" => self.max_len = parse_value(key, v)?,
                "alphabet" => self.alphabet = parse_value(key, v)?,
                "noise" => self.noise = parse_value(key, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Held-out share of the unlabeled sentences used as the denoising dev split.
    pub fn pretrain_dev_lines(&self, total: usize) -> usize {
        (total / 10).min(self.dev)
    }
}

/// A multi-source example as text: K tagged sources and an untagged target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextExample {
    pub sources: Vec<String>,
    pub target: String,
}

/// The three kinds of data: unlabeled sentences (`pretrain`), single-source
/// pairs derived from the multi-source training split (`single`), and the
/// multi-source splits.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSet {
    pub pretrain: Vec<String>,
    pub single_train: Vec<(String, String)>,
    pub single_dev: Vec<(String, String)>,
    pub train: Vec<TextExample>,
    pub dev: Vec<TextExample>,
    pub test: Vec<TextExample>,
}

fn letter(k: usize) -> char {
    (b'a' + (k as u8 - 1) % 19) as char
}

pub fn source_token(k: usize, i: usize) -> String {
    format!("{}{i}", letter(k))
}

pub fn target_token(i: usize) -> String {
    format!("t{i}")
}

/// Deterministic token maps: `maps[k][i]` is the target index for source
/// token `i` of language `k + 1`, plus a cross-language map for
/// noisy-duplicate.
struct Maps {
    to_target: Vec<Vec<usize>>,
    to_second: Vec<usize>,
}

impl Maps {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let perm = |rng: &mut ChaCha8Rng| {
            let mut p: Vec<usize> = (0..spec.alphabet).collect();
            p.shuffle(rng);
            p
        };
        Maps { to_target: (0..spec.sources).map(|_| perm(rng)).collect(), to_second: perm(rng) }
    }
}

fn sentence(k: usize, ids: &[usize]) -> String {
    let mut s = tag_token(k);
    for &i in ids {
        s.push(' ');
        s.push_str(&source_token(k, i));
    }
    s
}

fn target_sentence(ids: &[usize]) -> String {
    ids.iter().map(|&i| target_token(i)).collect::<Vec<_>>().join(" ")
}

fn example(spec: &SynthSpec, maps: &Maps, rng: &mut ChaCha8Rng) -> TextExample {
    let a = spec.alphabet;
    let n = rng.gen_range(spec.min_len..=spec.max_len);
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(0..a)).collect() };
    match spec.task {
        Task::ComplementaryHalves => {
            let srcs: Vec<Vec<usize>> = (0..spec.sources).map(|_| draw(rng, n)).collect();
            let mut tgt = Vec::with_capacity(n * spec.sources);
            for i in 0..n {
                for (k, s) in srcs.iter().enumerate() {
                    tgt.push(maps.to_target[k][s[i]]);
                }
            }
            TextExample {
                sources: srcs.iter().enumerate().map(|(k, s)| sentence(k + 1, s)).collect(),
                target: target_sentence(&tgt),
            }
        }
        Task::NoisyDuplicate => {
            let first = draw(rng, n);
            let mut sources = vec![sentence(1, &first)];
            for k in 2..=spec.sources {
                let noisy: Vec<usize> = first
                    .iter()
                    .map(|&i| if rng.gen_bool(spec.noise) { rng.gen_range(0..a) } else { maps.to_second[i] })
                    .collect();
                sources.push(sentence(k, &noisy));
            }
            let tgt: Vec<usize> = first.iter().map(|&i| maps.to_target[0][i]).collect();
            TextExample { sources, target: target_sentence(&tgt) }
        }
        Task::TaggedCopy => {
            let srcs: Vec<Vec<usize>> = (0..spec.sources)
                .map(|_| {
                    let n = rng.gen_range(spec.min_len..=spec.max_len);
                    draw(rng, n)
                })
                .collect();
            let sources: Vec<String> = srcs.iter().enumerate().map(|(k, s)| sentence(k + 1, s)).collect();
            let target = sources[0].split_whitespace().skip(1).collect::<Vec<_>>().join(" ");
            TextExample { sources, target }
        }
    }
}

/// Picks one source uniformly and pairs it with the target.
pub fn sample_single_source(example: &TextExample, rng: &mut impl Rng) -> (String, String) {
    let k = rng.gen_range(0..example.sources.len());
    (example.sources[k].clone(), example.target.clone())
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<CorpusSet> {
    if spec.sources == 0 || spec.alphabet == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Corpus("sources, alphabet and lengths must be positive with min_len <= max_len".into()));
    }
    if spec.task == Task::NoisyDuplicate && spec.sources < 2 {
        return Err(Error::Corpus("noisy-duplicate needs at least two sources".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = Maps::new(spec, &mut rng);
    let mut split = |n: usize| (0..n).map(|_| example(spec, &maps, &mut rng)).collect::<Vec<_>>();
    let train = split(spec.train);
    let dev = split(spec.dev);
    let test = split(spec.test);

    let mut pre_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut pretrain = Vec::new();
    for _ in 0..spec.pretrain_per_language {
        for k in 1..=spec.sources {
            let n = pre_rng.gen_range(spec.min_len..=spec.max_len);
            let ids: Vec<usize> = (0..n).map(|_| pre_rng.gen_range(0..spec.alphabet)).collect();
            pretrain.push(sentence(k, &ids));
        }
        // targets are longer for complementary-halves; draw from the same
        // length range the task produces
        let n = pre_rng.gen_range(spec.min_len..=spec.max_len)
            * if spec.task == Task::ComplementaryHalves { spec.sources } else { 1 };
        let ids: Vec<usize> = (0..n).map(|_| pre_rng.gen_range(0..spec.alphabet)).collect();
        pretrain.push(target_sentence(&ids));
    }

    let mut ss_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_5151);
    let single_train = train.iter().map(|e| sample_single_source(e, &mut ss_rng)).collect();
    let single_dev = dev.iter().map(|e| sample_single_source(e, &mut ss_rng)).collect();
    Ok(CorpusSet { pretrain, single_train, single_dev, train, dev, test })
}
