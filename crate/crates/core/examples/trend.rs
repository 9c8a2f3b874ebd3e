//! One seed of the trend experiments with timings; settings come from
//! `key=value` arguments in the experiment config syntax.

use std::time::Instant;

use msgen::experiment::{single_source_view, Experiment, Variant};
use msgen::kv::parse_kv;

fn main() -> msgen::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut e = Experiment::default();
    e.apply_pairs(&parse_kv(&args.iter().skip(1).cloned().collect::<Vec<_>>().join("\n"))?)?;
    let t = Instant::now();
    let p = e.prepare(seed)?;
    let pre = e.run_pretrain(&p, seed)?;
    eprintln!("pretrain {:.1}s", t.elapsed().as_secs_f64());
    let ssg = e.run_ssg(&p, &pre, seed)?;
    eprintln!("ssg {:.1}s", t.elapsed().as_secs_f64());
    for k in 1..=2 {
        let r = e.evaluate(&ssg, &p.vocab, &single_source_view(&p.test, k))?;
        println!("ssg source {k}: {:.2}", r.bleu);
    }
    for v in [Variant::Full, Variant::FineWithoutCrossAttention, Variant::FreezePretrained] {
        let c = e.run_variant(v, &p, &pre, &ssg, seed)?;
        let r = e.evaluate(&c, &p.vocab, &p.test)?;
        println!("{v}: {:.2}  ({:.1}s)", r.bleu, t.elapsed().as_secs_f64());
        if v == Variant::Full {
            for k in 1..=2 {
                let sw = msgen::eval::replace_source(&p.test, k, seed, false)?;
                println!("  randomized {k}: {:.2}", e.evaluate(&c, &p.vocab, &sw)?.bleu);
            }
        }
    }
    let small = p.reduced(5000);
    let ssg5 = e.run_ssg(&small, &pre, seed)?;
    for v in [Variant::Full, Variant::NoGradual] {
        let c = e.run_variant(v, &small, &pre, &ssg5, seed)?;
        println!("5k {v}: {:.2}  ({:.1}s)", e.evaluate(&c, &p.vocab, &p.test)?.bleu, t.elapsed().as_secs_f64());
    }
    Ok(())
}
