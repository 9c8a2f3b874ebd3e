//! End-to-end runs on a synthetic corpus: data preparation, the gradual
//! pipeline and the ablation variants built on top of it.

use std::collections::BTreeMap;
use std::fmt;

use crate::corpus::{generate, CorpusSet, MultiSourceExample, SynthSpec, Vocabulary};
use crate::decoding::SearchConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::kv::parse_value;
use crate::model::ModelConfig;
use crate::trainer::{train_stage, Checkpoint, FreezePolicy, Init, Objective, StageConfig, StageData};
use crate::Real;

/// Rows of the ablation matrix, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Multi-source finetuning straight from the denoising checkpoint.
    NoGradual,
    NoSeparatedCrossAttention,
    NoConcatenatedEncoding,
    NoSegmentEmbedding,
    NoFineEncoder,
    FineWithoutCrossAttention,
    TwoFineLayers,
    /// Only the fine encoder is trained in the multi-source stage.
    FreezePretrained,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoGradual,
        Variant::NoSeparatedCrossAttention,
        Variant::NoConcatenatedEncoding,
        Variant::NoSegmentEmbedding,
        Variant::NoFineEncoder,
        Variant::FineWithoutCrossAttention,
        Variant::TwoFineLayers,
        Variant::FreezePretrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGradual => "-gradual-finetuning",
            Variant::NoSeparatedCrossAttention => "-separated-cross-attention",
            Variant::NoConcatenatedEncoding => "-concatenated-encoding",
            Variant::NoSegmentEmbedding => "-segment-embedding",
            Variant::NoFineEncoder => "fine-encoder-none",
            Variant::FineWithoutCrossAttention => "fine-encoder-without-cross-attention",
            Variant::TwoFineLayers => "fine-encoder-2-layers",
            Variant::FreezePretrained => "freeze-pretrained",
        }
    }

    /// The multi-source architecture this variant trains.
    pub fn model(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        match self {
            Variant::NoSeparatedCrossAttention => m.separated_decoder_cross_attention = false,
            Variant::NoConcatenatedEncoding => m.concatenated_encoding = false,
            Variant::NoSegmentEmbedding => m.use_segment_embedding = false,
            Variant::NoFineEncoder => m.use_fine_encoder = false,
            Variant::FineWithoutCrossAttention => m.fine_encoder_cross_attention = false,
            Variant::TwoFineLayers => m.fine_layers = 2,
            Variant::Full | Variant::NoGradual | Variant::FreezePretrained => {}
        }
        m
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encoded data for every stage.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub pretrain: StageData,
    pub ssg: StageData,
    pub msg: StageData,
    pub test: Vec<MultiSourceExample>,
}

impl Prepared {
    /// Vocabulary over every unlabeled sentence and every multi-source
    /// training example, then each split encoded with it.
    pub fn from_corpus(set: &CorpusSet, spec: &SynthSpec) -> Result<Self> {
        let texts = set
            .pretrain
            .iter()
            .map(String::as_str)
            .chain(set.train.iter().flat_map(|e| e.sources.iter().map(String::as_str).chain([e.target.as_str()])));
        let vocab = Vocabulary::build(texts, spec.sources)?;
        let first_regular = vocab.first_regular();
        let held = spec.pretrain_dev_lines(set.pretrain.len());
        let (pre_train, pre_dev) = set.pretrain.split_at(set.pretrain.len() - held);
        let denoise = |lines: &[String]| lines.iter().map(|s| StageData::denoising_example(&vocab, s)).collect();
        let pairs = |p: &[(String, String)]| {
            p.iter()
                .map(|(s, t)| MultiSourceExample { sources: vec![vocab.encode(s)], target: vocab.encode_target(t) })
                .collect()
        };
        let multi =
            |e: &[crate::corpus::TextExample]| e.iter().map(|x| MultiSourceExample::encode(&vocab, x)).collect();
        Ok(Prepared {
            pretrain: StageData { train: denoise(pre_train), dev: denoise(pre_dev), first_regular },
            ssg: StageData { train: pairs(&set.single_train), dev: pairs(&set.single_dev), first_regular },
            msg: StageData { train: multi(&set.train), dev: multi(&set.dev), first_regular },
            test: multi(&set.test),
            vocab,
        })
    }

    /// Keeps the first `n` labeled training examples, single-source pairs
    /// included (they are derived one-to-one from the multi-source split).
    pub fn reduced(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.msg.train.truncate(n);
        out.ssg.train.truncate(n);
        out
    }
}

/// The examples with only source `k` (1-based) kept.
pub fn single_source_view(examples: &[MultiSourceExample], k: usize) -> Vec<MultiSourceExample> {
    examples
        .iter()
        .map(|e| MultiSourceExample { sources: vec![e.sources[k - 1].clone()], target: e.target.clone() })
        .collect()
}

/// Settings for a full run. Model keys are unprefixed; corpus keys use the
/// `data.` prefix; stage keys apply to every stage unprefixed and to one
/// stage with a `pretrain.`, `ssg.` or `msg.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub data: SynthSpec,
    /// Multi-source architecture; `vocab_size` is taken from the vocabulary.
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub ssg: StageConfig,
    pub msg: StageConfig,
    pub search: SearchConfig,
    pub smooth: bool,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            data: SynthSpec::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig::new(Objective::Denoising),
            ssg: StageConfig::new(Objective::Ssg),
            msg: StageConfig::new(Objective::Msg),
            search: SearchConfig::default(),
            smooth: false,
        }
    }
}

fn scoped(pairs: &BTreeMap<String, String>, prefix: &str) -> BTreeMap<String, String> {
    pairs.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone()))).collect()
}

fn unscoped(pairs: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    pairs.iter().filter(|(k, _)| !k.contains('.')).map(|(k, v)| (k.clone(), v.clone())).collect()
}

impl Experiment {
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        let common = unscoped(pairs);
        self.data.apply_pairs(&scoped(pairs, "data."))?;
        self.model.apply_pairs(&common)?;
        for (stage, prefix, objective) in [
            (&mut self.pretrain, "pretrain.", Objective::Denoising),
            (&mut self.ssg, "ssg.", Objective::Ssg),
            (&mut self.msg, "msg.", Objective::Msg),
        ] {
            stage.apply_pairs(&common)?;
            stage.apply_pairs(&scoped(pairs, prefix))?;
            stage.objective = objective;
        }
        for (key, v) in &common {
            match key.as_str() {
                "beam" => self.search.beam = parse_value(key, v)?,
                "alpha" => self.search.alpha = parse_value(key, v)?,
                "decode_max_len" => self.search.max_len = parse_value(key, v)?,
                "smooth" => self.smooth = parse_value(key, v)?,
                _ => {}
            }
        }
        if self.data.sources != self.model.sources {
            return Err(Error::Config(format!(
                "corpus has {} sources but the model expects {}",
                self.data.sources, self.model.sources
            )));
        }
        self.search.validate()
    }

    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        Prepared::from_corpus(&generate(&self.data, seed)?, &self.data)
    }

    /// Multi-source architecture sized for `p`'s vocabulary.
    pub fn model_for(&self, p: &Prepared) -> ModelConfig {
        ModelConfig { vocab_size: p.vocab.len(), ..self.model.clone() }
    }

    fn seeded(stage: &StageConfig, seed: u64) -> StageConfig {
        StageConfig { seed, ..stage.clone() }
    }

    pub fn run_pretrain(&self, p: &Prepared, seed: u64) -> Result<Checkpoint> {
        let model = self.model_for(p).single_source();
        Ok(train_stage::<Real>(&Self::seeded(&self.pretrain, seed), Init::Fresh(&model), &p.pretrain)?.0)
    }

    pub fn run_ssg(&self, p: &Prepared, pretrained: &Checkpoint, seed: u64) -> Result<Checkpoint> {
        Ok(train_stage::<Real>(&Self::seeded(&self.ssg, seed), Init::Resume(pretrained), &p.ssg)?.0)
    }

    /// Multi-source stage of `variant`, extending the ssg checkpoint (or the
    /// pretrained one for [`Variant::NoGradual`]).
    pub fn run_variant(
        &self,
        variant: Variant,
        p: &Prepared,
        pretrained: &Checkpoint,
        ssg: &Checkpoint,
        seed: u64,
    ) -> Result<Checkpoint> {
        let model = variant.model(&self.model_for(p));
        let mut cfg = Self::seeded(&self.msg, seed);
        let from = match variant {
            Variant::NoGradual => {
                cfg.direct = true;
                pretrained
            }
            _ => ssg,
        };
        if variant == Variant::FreezePretrained {
            cfg.freeze = FreezePolicy::FreezePretrained;
        }
        Ok(train_stage::<Real>(&cfg, Init::Extend(from, &model), &p.msg)?.0)
    }

    pub fn evaluate(
        &self,
        ckpt: &Checkpoint,
        vocab: &Vocabulary,
        examples: &[MultiSourceExample],
    ) -> Result<EvalReport> {
        Ok(evaluate_model(&ckpt.config, &ckpt.params, vocab, examples, &self.search, self.smooth)?.0)
    }

    /// Trains the shared pretrained and ssg checkpoints, then every variant,
    /// reporting each row's test score through `row` as soon as it is known.
    pub fn ablate(&self, seed: u64, mut row: impl FnMut(Variant, &EvalReport)) -> Result<Vec<(Variant, EvalReport)>> {
        let p = self.prepare(seed)?;
        let pretrained = self.run_pretrain(&p, seed)?;
        let ssg = self.run_ssg(&p, &pretrained, seed)?;
        let mut out = Vec::new();
        for v in Variant::ALL {
            let ckpt = self.run_variant(v, &p, &pretrained, &ssg, seed)?;
            let report = self.evaluate(&ckpt, &p.vocab, &p.test)?;
            row(v, &report);
            out.push((v, report));
        }
        Ok(out)
    }
}
