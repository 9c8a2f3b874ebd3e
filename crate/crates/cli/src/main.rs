//! `msgen`: data generation, the training pipeline, decoding and evaluation.
//!
//! Results go to stdout as one JSON object per line; progress goes to stderr.
//! Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use msgen::corpus::{generate, read_fields, write_fields, MultiSourceExample, Vocabulary};
use msgen::decoding::translate_all;
use msgen::eval::{adversarial_eval, corpus_bleu, evaluate_model, paired_bootstrap, EvalReport};
use msgen::experiment::Experiment;
use msgen::kv::read_kv;
use msgen::trainer::{load_checkpoint, train_stage, Init, Objective, Stage, StageConfig, StageData};
use msgen::{Error, Real, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "msgen", version, about = "Multi-source sequence generation with gradual finetuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Experiment config: `key=value` lines, `#` comments.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Checkpoint to start from or to decode with.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Vocabulary written by build-vocab.
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Training corpus.
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Dev corpus for checkpoint selection.
    #[arg(long, value_name = "FILE")]
    dev: Option<PathBuf>,
    /// Where to write the resulting checkpoint.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Allow skipping a pipeline stage.
    #[arg(long)]
    direct: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build a vocabulary from corpus files.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        /// Vocabulary file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(required = true, value_name = "CORPUS")]
        inputs: Vec<PathBuf>,
    },
    /// Denoising pretraining of a single-source model.
    Pretrain(StageArgs),
    /// Single-source finetuning.
    FinetuneSsg(StageArgs),
    /// Multi-source finetuning: extends an ssg checkpoint or resumes an msg one.
    FinetuneMsg {
        #[command(flatten)]
        stage: StageArgs,
        /// Train only the fine encoder.
        #[arg(long)]
        freeze_pretrained: bool,
    },
    /// Decode a file of tab-separated sources.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        /// Tab-separated sources, one example per line.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Hypotheses, one per line; stdout when omitted.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Score hypotheses, or decode and score a corpus with a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Hypotheses, one per line.
        #[arg(long, value_name = "FILE", requires = "reference", conflicts_with = "data")]
        hyp: Option<PathBuf>,
        /// References, one per line.
        #[arg(long, value_name = "FILE")]
        reference: Option<PathBuf>,
        /// Multi-source corpus to decode (needs --checkpoint and --vocab).
        #[arg(long, value_name = "FILE", requires = "vocab")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Competing hypotheses for a paired bootstrap test.
        #[arg(long, value_name = "FILE")]
        baseline: Option<PathBuf>,
        /// Bootstrap resamples.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Write the decoded hypotheses here.
        #[arg(long, value_name = "FILE")]
        hyp_out: Option<PathBuf>,
    },
    /// Score a checkpoint with one source replaced by another example's.
    AdversarialEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Source to randomize, 1-based.
        #[arg(long, default_value_t = 1)]
        which: usize,
    },
    /// Train and score every ablation variant on a generated corpus.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn experiment(common: &Common) -> Result<Experiment> {
    let mut e = Experiment::default();
    for stage in [&mut e.pretrain, &mut e.ssg, &mut e.msg] {
        stage.log_every = 100;
    }
    if let Some(path) = &common.config {
        e.apply_pairs(&read_kv(path)?)?;
    }
    Ok(e)
}

fn seed(common: &Common) -> u64 {
    common.seed.unwrap_or(1)
}

fn emit(record: Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{record}");
}

fn record(command: &str, r: &EvalReport) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("bleu".into(), json!(r.bleu));
    m.insert("precisions".into(), json!(r.precisions));
    m.insert("bp".into(), json!(r.bp));
    if let Some(p) = r.p_value {
        m.insert("p_value".into(), json!(p));
    }
    m
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn require_checkpoint(common: &Common) -> Result<&Path> {
    common.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

/// Reads a corpus of `sources` tab-separated sources, with or without a
/// trailing target field.
fn read_sources(path: &Path, sources: usize, vocab: &Vocabulary) -> Result<Vec<Vec<Vec<u32>>>> {
    let fields = read_fields(path, sources).or_else(|_| read_fields(path, sources + 1))?;
    Ok(fields.iter().map(|f| f[..sources].iter().map(|s| vocab.encode(s)).collect()).collect())
}

fn read_examples(path: &Path, sources: usize, vocab: &Vocabulary) -> Result<Vec<MultiSourceExample>> {
    Ok(msgen::corpus::read_multi(path, sources)?.iter().map(|e| MultiSourceExample::encode(vocab, e)).collect())
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let e = experiment(common)?;
    let set = generate(&e.data, seed(common))?;
    std::fs::create_dir_all(out).map_err(|x| Error::Io { path: out.into(), source: x })?;
    let held = e.data.pretrain_dev_lines(set.pretrain.len());
    let (pre_train, pre_dev) = set.pretrain.split_at(set.pretrain.len() - held);
    let one = |lines: &[String]| lines.iter().map(|s| vec![s.clone()]).collect::<Vec<_>>();
    write_fields(out.join("pretrain.train.txt"), one(pre_train))?;
    write_fields(out.join("pretrain.dev.txt"), one(pre_dev))?;
    let two = |pairs: &[(String, String)]| pairs.iter().map(|(s, t)| vec![s.clone(), t.clone()]).collect::<Vec<_>>();
    write_fields(out.join("single.train.tsv"), two(&set.single_train))?;
    write_fields(out.join("single.dev.tsv"), two(&set.single_dev))?;
    for (name, split) in [("train.tsv", &set.train), ("dev.tsv", &set.dev), ("test.tsv", &set.test)] {
        msgen::corpus::write_multi(out.join(name), split)?;
    }
    eprintln!(
        "wrote {} corpus with {} sources (seed {}) to {}",
        e.data.task,
        e.data.sources,
        seed(common),
        out.display()
    );
    Ok(())
}

fn build_vocab(common: &Common, out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let e = experiment(common)?;
    let vocab = Vocabulary::build_from_files(inputs, e.model.sources)?;
    vocab.save(out)?;
    eprintln!("{} tokens written to {}", vocab.len(), out.display());
    Ok(())
}

fn run_stage(args: &StageArgs, objective: Objective, freeze: bool) -> Result<()> {
    let e = experiment(&args.common)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let mut cfg: StageConfig = match objective {
        Objective::Denoising => e.pretrain.clone(),
        Objective::Ssg => e.ssg.clone(),
        Objective::Msg => e.msg.clone(),
    };
    cfg.train = Some(args.train.clone());
    cfg.dev = args.dev.clone();
    cfg.direct |= args.direct;
    cfg.seed = seed(&args.common);
    if freeze {
        cfg.freeze = msgen::trainer::FreezePolicy::FreezePretrained;
    }
    let mut model = e.model.clone();
    model.vocab_size = vocab.len();
    let start = args.common.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let single = model.single_source();
    let init = match (objective, &start) {
        (Objective::Msg, Some(c)) if c.stage == Stage::Msg => Init::Resume(c),
        (Objective::Msg, Some(c)) => Init::Extend(c, &model),
        (Objective::Msg, None) => Init::Fresh(&model),
        (_, Some(c)) => Init::Resume(c),
        (_, None) => Init::Fresh(&single),
    };
    let data = StageData::load(&cfg, &vocab, model.sources)?;
    let (ckpt, report) = train_stage::<Real>(&cfg, init, &data)?;
    ckpt.save(&args.out)?;
    eprintln!(
        "{} steps; best dev at step {}; checkpoint written to {}",
        report.steps,
        report.best_step,
        args.out.display()
    );
    Ok(())
}

fn translate(common: &Common, vocab: &Path, input: &Path, output: Option<&Path>) -> Result<()> {
    let e = experiment(common)?;
    let ckpt = load_checkpoint(require_checkpoint(common)?)?;
    let vocab = Vocabulary::load(vocab)?;
    let sources = read_sources(input, ckpt.config.sources, &vocab)?;
    let hyps: Vec<String> = translate_all(&ckpt.config, &ckpt.params, &sources, &e.search)?
        .iter()
        .map(|h| vocab.decode(h.content()))
        .collect();
    match output {
        Some(path) => write_lines(path, &hyps)?,
        None => {
            let mut out = std::io::stdout().lock();
            for h in &hyps {
                let _ = writeln!(out, "{h}");
            }
        }
    }
    eprintln!("translated {} sentences", hyps.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    common: &Common,
    hyp: Option<&Path>,
    reference: Option<&Path>,
    data: Option<&Path>,
    vocab: Option<&Path>,
    baseline: Option<&Path>,
    samples: usize,
    hyp_out: Option<&Path>,
) -> Result<()> {
    let e = experiment(common)?;
    let (hyps, refs) = match (hyp, data) {
        (Some(h), _) => (read_lines(h)?, read_lines(reference.expect("clap requires --reference"))?),
        (None, Some(d)) => {
            let ckpt = load_checkpoint(require_checkpoint(common)?)?;
            let vocab = Vocabulary::load(vocab.expect("clap requires --vocab"))?;
            let examples = read_examples(d, ckpt.config.sources, &vocab)?;
            let (_, hyps) = evaluate_model(&ckpt.config, &ckpt.params, &vocab, &examples, &e.search, e.smooth)?;
            let refs = examples.iter().map(|x| vocab.decode_target(&x.target)).collect();
            (hyps, refs)
        }
        (None, None) => return Err(Error::Config("give --hyp and --reference, or --data with --checkpoint".into())),
    };
    if let Some(path) = hyp_out {
        write_lines(path, &hyps)?;
    }
    let mut report = corpus_bleu(&hyps, &refs, e.smooth)?;
    if let Some(b) = baseline {
        let other = read_lines(b)?;
        report.p_value = Some(paired_bootstrap(&hyps, &other, &refs, samples, seed(common), e.smooth)?);
    }
    emit(Value::Object(record("evaluate", &report)));
    Ok(())
}

fn adversarial(common: &Common, vocab: &Path, data: &Path, which: usize) -> Result<()> {
    let e = experiment(common)?;
    let ckpt = load_checkpoint(require_checkpoint(common)?)?;
    let vocab = Vocabulary::load(vocab)?;
    let examples = read_examples(data, ckpt.config.sources, &vocab)?;
    let r = adversarial_eval(&ckpt.config, &ckpt.params, &vocab, &examples, which, seed(common), &e.search, e.smooth)?;
    eprintln!("source {which}: normal {:.2}, randomized {:.2}", r.normal.bleu, r.randomized.bleu);
    let mut m = record("adversarial-eval", &r.normal);
    m.insert("delta".into(), json!(r.delta));
    emit(Value::Object(m));
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let e = experiment(common)?;
    let mut full = None;
    e.ablate(seed(common), |variant, report| {
        let base = *full.get_or_insert(report.bleu);
        eprintln!("{variant}: {:.2}", report.bleu);
        let mut m = record("ablate", report);
        m.insert("variant".into(), json!(variant.name()));
        m.insert("delta".into(), json!(base - report.bleu));
        emit(Value::Object(m));
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::BuildVocab { common, out, inputs } => build_vocab(&common, &out, &inputs),
        Command::Pretrain(args) => run_stage(&args, Objective::Denoising, false),
        Command::FinetuneSsg(args) => run_stage(&args, Objective::Ssg, false),
        Command::FinetuneMsg { stage, freeze_pretrained } => run_stage(&stage, Objective::Msg, freeze_pretrained),
        Command::Translate { common, vocab, input, output } => translate(&common, &vocab, &input, output.as_deref()),
        Command::Evaluate { common, hyp, reference, data, vocab, baseline, samples, hyp_out } => evaluate(
            &common,
            hyp.as_deref(),
            reference.as_deref(),
            data.as_deref(),
            vocab.as_deref(),
            baseline.as_deref(),
            samples,
            hyp_out.as_deref(),
        ),
        Command::AdversarialEval { common, vocab, data, which } => adversarial(&common, &vocab, &data, which),
        Command::Ablate { common } => ablate(&common),
    }
}

/// Prints a parse error followed by the help of the subcommand it concerns.
fn usage_error(err: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = err.print();
        return ExitCode::SUCCESS;
    }
    let _ = err.print();
    let mut cmd = Cli::command();
    let name = std::env::args().nth(1).unwrap_or_default();
    let help = match cmd.find_subcommand_mut(&name) {
        Some(sub) => sub.render_help(),
        None => cmd.render_help(),
    };
    eprintln!("\n{help}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
