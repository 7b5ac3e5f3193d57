//! Compares contrastive and supervised-only training on a synthetic corpus.
//!
//! `cargo run --release --example ablation -- [seeds] [key=value ...]`

use std::time::Instant;

use charcl_core::data::{generate_synthetic_corpus, SyntheticSpec};
use charcl_core::trainer::{train, Task, TaskRatios, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut spec = SyntheticSpec::default();
    let mut cfg = TrainConfig::preset(Task::Guessing);
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        if let Some(k) = k.strip_prefix("synth.") {
            let mut t = toml::Table::try_from(&spec).unwrap();
            t.insert(k.into(), v.parse::<toml::Value>().unwrap_or(toml::Value::String(v.into())));
            spec = t.try_into().unwrap();
        } else {
            cfg.set(k, v).unwrap();
        }
    }
    let (mut ours, mut sup) = (Vec::new(), Vec::new());
    let verbose = std::env::var_os("VERBOSE").is_some();
    let start = Instant::now();
    let offset: u64 = std::env::var("SEED_OFFSET").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in offset..offset + seeds {
        let corpus = generate_synthetic_corpus(&spec, seed).unwrap();
        let mut row = Vec::new();
        let ours_ratios = match std::env::var("OURS") {
            Ok(v) => {
                let r: Vec<f64> = v.split(',').map(|x| x.parse().unwrap()).collect();
                TaskRatios::new(r[0], r[1], r[2])
            }
            Err(_) => TaskRatios::default(),
        };
        for ratios in [ours_ratios, TaskRatios::SUPERVISED_ONLY] {
            let mut c = cfg.clone();
            c.seed = seed;
            c.ratios = ratios;
            let t = Instant::now();
            let out = train(&c, &corpus, None, &mut |_| {}).unwrap();
            let curve: Vec<String> = out.history.iter().map(|e| format!("{:.0}", 100.0 * e.dev.micro.f1)).collect();
            if verbose {
                println!("  {:.1} ({:.1}s) [{}]", 100.0 * out.best_dev.micro.f1, t.elapsed().as_secs_f64(), curve.join(" "));
            }
            row.push(100.0 * out.best_dev.micro.f1);
        }
        println!("seed {seed}: ours {:.1} sup {:.1}", row[0], row[1]);
        ours.push(row[0]);
        sup.push(row[1]);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    println!(
        "median ours {:.1} sup {:.1} ({:.0}s)",
        median(&mut ours),
        median(&mut sup),
        start.elapsed().as_secs_f64()
    );
}
