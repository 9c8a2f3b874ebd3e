use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Stage};
use super::optim::{adam_update, clip_global_norm, lr_inverse_sqrt, AdamConfig, AdamState};
use crate::corpus::{corrupt_with, make_batch, pack_batches, read_fields, read_multi, MultiSourceExample, Vocabulary};
use crate::error::{Error, Result};
use crate::kv::parse_value;
use crate::model::{is_fine_encoder_param, ModelConfig, Net, Parameters};
use crate::scalar::Scalar;
use crate::special::PAD;
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Reconstruct a sentence from its corruption.
    Denoising,
    /// Single-source pairs.
    Ssg,
    /// K sources and a target.
    Msg,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Denoising => "denoising",
            Objective::Ssg => "ssg",
            Objective::Msg => "msg",
        }
    }

    /// Stage marker of the checkpoints this objective produces.
    pub fn stage(self) -> Stage {
        match self {
            Objective::Denoising => Stage::Pretrained,
            Objective::Ssg => Stage::Ssg,
            Objective::Msg => Stage::Msg,
        }
    }

    /// Tab-separated fields per corpus line.
    pub fn arity(self, sources: usize) -> usize {
        match self {
            Objective::Denoising => 1,
            Objective::Ssg => 2,
            Objective::Msg => sources + 1,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Objective::Denoising, Objective::Ssg, Objective::Msg]
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    None,
    /// Train only the fine-encoder tensors.
    FreezePretrained,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezePolicy::None),
            "freeze-pretrained" => Ok(FreezePolicy::FreezePretrained),
            _ => Err(Error::Config(format!("unknown freeze policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub objective: Objective,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Padded tokens per batch, sources and target together.
    pub max_tokens: usize,
    pub warmup: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub freeze: FreezePolicy,
    /// Dev evaluation cadence in steps.
    pub eval_every: u64,
    /// Multiplier on the inverse-sqrt learning rate.
    pub lr_scale: f64,
    pub clip_norm: f64,
    /// Fraction of tokens masked for denoising.
    pub noise_ratio: f64,
    /// Allow skipping a pipeline stage.
    pub direct: bool,
    /// Start the step counter (and warmup) from zero.
    pub restart_schedule: bool,
    /// Print the training loss to stderr every this many steps; 0 is silent.
    pub log_every: u64,
}

impl StageConfig {
    pub fn new(objective: Objective) -> Self {
        StageConfig {
            objective,
            train: None,
            dev: None,
            max_tokens: 1024,
            warmup: 500,
            max_steps: 2000,
            seed: 1,
            freeze: FreezePolicy::None,
            eval_every: 200,
            lr_scale: 1.0,
            clip_norm: 1.0,
            noise_ratio: 0.35,
            direct: false,
            restart_schedule: true,
            log_every: 0,
        }
    }

    /// Overrides fields named in `pairs`; other keys are ignored.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, v) in pairs {
            match key.as_str() {
                "objective" => self.objective = v.parse()?,
                "train" => self.train = Some(PathBuf::from(v)),
                "dev" => self.dev = Some(PathBuf::from(v)),
                "max_tokens" => self.max_tokens = parse_value(key, v)?,
                "warmup" => self.warmup = parse_value(key, v)?,
                "max_steps" => self.max_steps = parse_value(key, v)?,
                "seed" => self.seed = parse_value(key, v)?,
                "freeze" => self.freeze = v.parse()?,
                "eval_every" => self.eval_every = parse_value(key, v)?,
                "lr_scale" => self.lr_scale = parse_value(key, v)?,
                "clip_norm" => self.clip_norm = parse_value(key, v)?,
                "noise_ratio" => self.noise_ratio = parse_value(key, v)?,
                "direct" => self.direct = parse_value(key, v)?,
                "restart_schedule" => self.restart_schedule = parse_value(key, v)?,
                "log_every" => self.log_every = parse_value(key, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Encoded training and dev examples. Denoising examples hold the clean
/// sentence as both source and target; corruption is drawn per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StageData {
    pub train: Vec<MultiSourceExample>,
    pub dev: Vec<MultiSourceExample>,
    /// Ids below this are never corrupted.
    pub first_regular: u32,
}

impl StageData {
    /// Reads `cfg.train` / `cfg.dev` with the arity the objective needs.
    pub fn load(cfg: &StageConfig, vocab: &Vocabulary, sources: usize) -> Result<Self> {
        let path = cfg.train.as_ref().ok_or_else(|| Error::Config("no training corpus given".into()))?;
        let train = Self::read(cfg.objective, path, vocab, sources)?;
        let dev = match &cfg.dev {
            Some(p) => Self::read(cfg.objective, p, vocab, sources)?,
            None => Vec::new(),
        };
        Ok(StageData { train, dev, first_regular: vocab.first_regular() })
    }

    fn read(
        objective: Objective,
        path: &PathBuf,
        vocab: &Vocabulary,
        sources: usize,
    ) -> Result<Vec<MultiSourceExample>> {
        Ok(match objective {
            Objective::Denoising => {
                read_fields(path, 1)?.iter().map(|f| Self::denoising_example(vocab, &f[0])).collect()
            }
            Objective::Ssg => read_fields(path, 2)?
                .iter()
                .map(|f| MultiSourceExample { sources: vec![vocab.encode(&f[0])], target: vocab.encode_target(&f[1]) })
                .collect(),
            Objective::Msg => read_multi(path, sources)?.iter().map(|e| MultiSourceExample::encode(vocab, e)).collect(),
        })
    }

    pub fn denoising_example(vocab: &Vocabulary, sentence: &str) -> MultiSourceExample {
        MultiSourceExample { sources: vec![vocab.encode(sentence)], target: vocab.encode_target(sentence) }
    }

    /// Applies fresh corruption to every source.
    pub fn corrupted(
        examples: &[MultiSourceExample],
        ratio: f64,
        first_regular: u32,
        rng: &mut impl Rng,
    ) -> Vec<MultiSourceExample> {
        examples
            .iter()
            .map(|e| MultiSourceExample {
                sources: e.sources.iter().map(|s| corrupt_with(s, ratio, first_regular, rng)).collect(),
                target: e.target.clone(),
            })
            .collect()
    }
}

/// Where a stage starts from.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    /// Random parameters for this architecture.
    Fresh(&'a ModelConfig),
    /// Keep training a checkpoint's architecture.
    Resume(&'a Checkpoint),
    /// Grow a single-source checkpoint into this multi-source architecture.
    Extend(&'a Checkpoint, &'a ModelConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    /// Mean token NLL.
    pub loss: f64,
    /// Teacher-forced argmax accuracy.
    pub accuracy: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<(u64, f64)>,
    pub dev: Vec<(u64, LossReport)>,
    pub best_step: u64,
    pub steps: u64,
}

/// Token-weighted loss and accuracy of `params` on `examples`.
pub fn evaluate_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    examples: &[MultiSourceExample],
    max_tokens: usize,
) -> Result<LossReport> {
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for batch in pack_batches(examples, max_tokens, &mut ChaCha8Rng::seed_from_u64(0))? {
        let refs: Vec<&MultiSourceExample> = batch.iter().map(|&i| &examples[i]).collect();
        let (s, t) = make_batch(&refs, max_tokens)?;
        let mut net = Net::with_trainable(cfg, params, Tape::new(), |_| false)?;
        let out = net.forward(&s, &t)?;
        let logits = net.tape.value(out.logits);
        let v = logits.cols();
        let n = out.labels.iter().filter(|&&l| l != PAD).count();
        nll += net.tape.value(out.loss).data()[0].as_f64() * n as f64;
        for (r, &label) in out.labels.iter().enumerate() {
            if label == PAD {
                continue;
            }
            let row = &logits.data()[r * v..][..v];
            let best = (0..v).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += (best == label as usize) as usize;
        }
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Corpus("no target tokens to evaluate".into()));
    }
    Ok(LossReport { loss: nll / tokens as f64, accuracy: correct as f64 / tokens as f64, tokens })
}

/// Copies every non-fine tensor of a single-source model into a fresh
/// multi-source model whose fine encoder is initialized from `seed`.
pub fn extend_to_msg(ssg: &Checkpoint, msg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    if ssg.stage != Stage::Ssg {
        return Err(Error::Stage(format!("extension needs an ssg checkpoint, got {}", ssg.stage)));
    }
    extend_params(ssg, msg, seed)
}

fn extend_params(from: &Checkpoint, msg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let mut out = Checkpoint::fresh(msg, Stage::Msg, seed)?;
    let mut offending = Vec::new();
    for (name, shape) in Parameters::<f32>::expected(msg) {
        if is_fine_encoder_param(&name) {
            continue;
        }
        match from.params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => *out.params.get_mut(&name).unwrap() = t.clone(),
            _ => offending.push(name),
        }
    }
    for name in from.params.names() {
        if is_fine_encoder_param(name) || out.params.get(name).is_none() {
            offending.push(name.clone());
        }
    }
    if !offending.is_empty() {
        return Err(Error::Architecture(offending));
    }
    Ok(out)
}

fn legal_start(cfg: &StageConfig, init: &Init) -> Result<Checkpoint> {
    let obj = cfg.objective;
    let stage_of = |c: &Checkpoint| c.stage;
    let refuse =
        |what: &str| Err(Error::Stage(format!("{obj} training cannot start from {what} without the direct override")));
    let start = match (obj, init) {
        (Objective::Denoising, Init::Fresh(m)) => Checkpoint::fresh(m, Stage::Pretrained, cfg.seed)?,
        (Objective::Denoising, Init::Resume(c)) if stage_of(c) == Stage::Pretrained => (*c).clone(),
        (Objective::Ssg, Init::Resume(c)) if matches!(stage_of(c), Stage::Pretrained | Stage::Ssg) => (*c).clone(),
        (Objective::Ssg, Init::Fresh(m)) if cfg.direct => Checkpoint::fresh(m, Stage::Ssg, cfg.seed)?,
        (Objective::Msg, Init::Resume(c)) if stage_of(c) == Stage::Msg => (*c).clone(),
        (Objective::Msg, Init::Extend(c, m)) if stage_of(c) == Stage::Ssg => extend_to_msg(c, m, cfg.seed)?,
        (Objective::Msg, Init::Extend(c, m)) if stage_of(c) == Stage::Pretrained && cfg.direct => {
            extend_params(c, m, cfg.seed)?
        }
        (Objective::Msg, Init::Fresh(m)) if cfg.direct => Checkpoint::fresh(m, Stage::Msg, cfg.seed)?,
        (_, Init::Fresh(_)) => return refuse("random parameters"),
        (_, Init::Resume(c)) | (_, Init::Extend(c, _)) => return refuse(&format!("a {} checkpoint", c.stage)),
    };
    if obj != Objective::Msg && start.config.sources != 1 {
        return Err(Error::Config(format!(
            "{obj} training needs a single-source model, got K={}",
            start.config.sources
        )));
    }
    Ok(start)
}

/// Runs one stage of the pipeline and returns the checkpoint with the best
/// dev loss (the final parameters when there is no dev set).
pub fn train_stage<T: Scalar>(cfg: &StageConfig, init: Init, data: &StageData) -> Result<(Checkpoint, TrainReport)> {
    let start = legal_start(cfg, &init)?;
    let model = start.config.clone();
    let k = model.sources;
    for e in data.train.iter().chain(&data.dev) {
        if e.sources.len() != k {
            return Err(Error::Corpus(format!(
                "{} training expects {} fields per line, corpus has {}",
                cfg.objective,
                cfg.objective.arity(k),
                e.sources.len() + 1
            )));
        }
        e.validate(k, model.max_len)?;
    }
    if data.train.is_empty() {
        return Err(Error::Corpus("empty training set".into()));
    }
    let freeze = cfg.freeze;
    let trainable = move |name: &str| freeze == FreezePolicy::None || is_fine_encoder_param(name);
    if !start.params.names().any(|n| trainable(n)) {
        return Err(Error::Stage("freeze policy leaves no trainable parameters".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let denoise = cfg.objective == Objective::Denoising;
    let dev = if denoise {
        StageData::corrupted(
            &data.dev,
            cfg.noise_ratio,
            data.first_regular,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde5),
        )
    } else {
        data.dev.clone()
    };
    let mut params: Parameters<T> = start.params.cast();
    let mut adam = AdamState::new(AdamConfig::default());
    adam.checked = true;
    let mut step = if cfg.restart_schedule || start.stage != cfg.objective.stage() { 0 } else { start.step };
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Parameters<T>)> = None;
    let mut evaluate = |step: u64, params: &Parameters<T>, report: &mut TrainReport| -> Result<()> {
        if dev.is_empty() {
            return Ok(());
        }
        let r = evaluate_loss(&model, params, &dev, cfg.max_tokens)?;
        if cfg.log_every > 0 {
            eprintln!("{} step {step}: dev loss {:.4} accuracy {:.4}", cfg.objective, r.loss, r.accuracy);
        }
        report.dev.push((step, r));
        if best.as_ref().is_none_or(|(l, _)| r.loss < *l) {
            best = Some((r.loss, params.clone()));
            report.best_step = step;
        }
        Ok(())
    };
    evaluate(step, &params, &mut report)?;
    let end = step + cfg.max_steps;
    'epochs: while step < end {
        let examples = if denoise {
            StageData::corrupted(&data.train, cfg.noise_ratio, data.first_regular, &mut rng)
        } else {
            data.train.clone()
        };
        for batch in pack_batches(&examples, cfg.max_tokens, &mut rng)? {
            step += 1;
            let refs: Vec<&MultiSourceExample> = batch.iter().map(|&i| &examples[i]).collect();
            let (s, t) = make_batch(&refs, cfg.max_tokens)?;
            let mut net = Net::with_trainable(&model, &params, Tape::new(), trainable)?;
            if model.dropout > 0.0 {
                net = net.with_dropout(ChaCha8Rng::seed_from_u64(rng.gen()));
            }
            let out = net.forward(&s, &t)?;
            let loss = net.tape.value(out.loss).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let grads = net.tape.backward(out.loss)?;
            let mut grads = net.named_gradients(&grads);
            drop(net);
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = cfg.lr_scale * lr_inverse_sqrt(step, cfg.warmup, model.d_model);
            adam_update(&mut params, &grads, &mut adam, lr)?;
            report.train_loss.push((step, loss));
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                eprintln!("{} step {step}: loss {loss:.4} lr {lr:.3e}", cfg.objective);
            }
            if step == end || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
                evaluate(step, &params, &mut report)?;
            }
            if step == end {
                break 'epochs;
            }
        }
    }
    report.steps = step;
    let chosen = match best {
        Some((_, p)) => p,
        None => {
            report.best_step = step;
            params
        }
    };
    let ckpt = Checkpoint { config: model.clone(), params: chosen.cast(), stage: cfg.objective.stage(), step, rng };
    Ok((ckpt, report))
}
