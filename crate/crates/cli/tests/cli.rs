use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "
data.train = 200
data.dev = 10
data.test = 10
data.pretrain_per_language = 60
d_model = 16
heads = 2
d_ff = 32
coarse_layers = 1
decoder_layers = 1
max_len = 24
max_tokens = 512
max_steps = 6
eval_every = 3
log_every = 0
decode_max_len = 8
";

fn msgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msgen")).args(args).output().unwrap()
}

fn config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn records(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = msgen(&["gen-data", "--config", s(&cfg), "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let o = msgen(&["translate", "--checkpoint", s(&missing), "--vocab", "v", "--input", "i"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
}

#[test]
fn unknown_flag_is_a_usage_error_with_help() {
    let o = msgen(&["evaluate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--no-such-flag") && err.contains("--reference"), "{err}");
    assert_eq!(msgen(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(msgen(&["--help"]).status.code(), Some(0));
}

#[test]
fn ablate_reports_variants_in_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = msgen(&["ablate", "--config", s(&cfg), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(&o);
    let names: Vec<&str> = recs.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(
        &names[..5],
        ["full", "-gradual-finetuning", "-separated-cross-attention", "-concatenated-encoding", "-segment-embedding"]
    );
    assert_eq!(names.len(), 9);
    for r in &recs {
        assert_eq!(r["command"], "ablate");
        assert_eq!(r["precisions"].as_array().unwrap().len(), 4);
        assert!(r["bleu"].is_f64() && r["bp"].is_f64() && r["delta"].is_f64());
    }
    assert_eq!(recs[0]["delta"].as_f64(), Some(0.0));
}

#[test]
fn pipeline_runs_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d);
    let c = s(&cfg);
    let data = d.join("data");
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let f = |name: &str| data.join(name).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let o = msgen(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["gen-data", "--config", c, "--out", s(&data)]);
    ok(&["build-vocab", "--config", c, "--out", &p("vocab"), &f("pretrain.train.txt"), &f("train.tsv")]);
    let stage = |cmd: &str, train: &str, dev: &str, from: Option<&str>, out: &str| {
        let mut args = vec![cmd.to_string(), "--config".into(), c.into(), "--vocab".into(), p("vocab")];
        args.extend(["--train".into(), f(train), "--dev".into(), f(dev), "--out".into(), p(out)]);
        if let Some(from) = from {
            args.extend(["--checkpoint".into(), p(from)]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };
    stage("pretrain", "pretrain.train.txt", "pretrain.dev.txt", None, "pre.ckpt");
    stage("finetune-ssg", "single.train.tsv", "single.dev.tsv", Some("pre.ckpt"), "ssg.ckpt");
    stage("finetune-msg", "train.tsv", "dev.tsv", Some("ssg.ckpt"), "msg.ckpt");

    // skipping the single-source stage needs --direct
    let o = msgen(&[
        "finetune-msg",
        "--config",
        c,
        "--vocab",
        &p("vocab"),
        "--train",
        &f("train.tsv"),
        "--checkpoint",
        &p("pre.ckpt"),
        "--out",
        &p("x.ckpt"),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let common = ["--config", c, "--checkpoint", &p("msg.ckpt"), "--vocab", &p("vocab")];
    ok(&[&["translate"], &common[..], &["--input", &f("test.tsv"), "--output", &p("hyp")]].concat());
    assert_eq!(std::fs::read_to_string(p("hyp")).unwrap().lines().count(), 10);

    let o = ok(&[&["evaluate"], &common[..], &["--data", &f("test.tsv"), "--hyp-out", &p("hyp2")]].concat());
    let rec = &records(&o)[0];
    assert_eq!(rec["command"], "evaluate");
    assert!(rec.get("p_value").is_none() && rec.get("delta").is_none());
    assert_eq!(std::fs::read(p("hyp")).unwrap(), std::fs::read(p("hyp2")).unwrap());

    let refs: String = std::fs::read_to_string(f("test.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit('\t').next().unwrap().to_string() + "\n")
        .collect();
    std::fs::write(p("ref"), refs).unwrap();
    let o = ok(&["evaluate", "--hyp", &p("ref"), "--reference", &p("ref"), "--baseline", &p("hyp")]);
    let rec = &records(&o)[0];
    assert_eq!(rec["bleu"].as_f64(), Some(100.0));
    assert!(rec["p_value"].as_f64().unwrap() < 0.01);

    let o = ok(&[&["adversarial-eval"], &common[..], &["--data", &f("test.tsv"), "--which", "2"]].concat());
    let rec = &records(&o)[0];
    assert_eq!(rec["command"], "adversarial-eval");
    assert!(rec["delta"].is_f64());
    let o = msgen(&[&["adversarial-eval"], &common[..], &["--data", &f("test.tsv"), "--which", "3"]].concat());
    assert_eq!(o.status.code(), Some(2));
}
