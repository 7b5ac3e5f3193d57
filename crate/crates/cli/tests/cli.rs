use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn charcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_charcl"))
        .current_dir(dir)
        .env_remove("CHARCL_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = charcl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(dir: &Path, args: &[&str]) -> String {
    let out = charcl(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

const TINY: [&str; 8] = [
    "--n_scenes",
    "30",
    "--utterances_per_scene",
    "4",
    "--tokens_per_utterance",
    "4",
    "--vocab_size",
    "30",
];

const QUICK: [&str; 12] = [
    "--stage1.epochs",
    "1",
    "--stage2.epochs",
    "1",
    "--model.hidden",
    "8",
    "--model.ff",
    "16",
    "--model.mlsa_ff",
    "16",
    "--stage1.learning_rate",
    "1e-3",
];

fn synth(dir: &Path, format: &str) {
    let mut args = vec!["--seed", "5", "--out", "data", "gen-synthetic", "--format", format];
    args.extend(TINY);
    ok(dir, &args);
}

fn train(dir: &Path, task: &str, seed: &str, out: &str) {
    let mut args = vec!["--seed", seed, "--out", out, "train", "--task", task, "--data", "data"];
    args.extend(QUICK);
    ok(dir, &args);
}

#[test]
fn train_predict_score_guessing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "guessing");
    train(d, "guessing", "7", "run");
    for f in ["checkpoint.json", "config.toml", "metrics.jsonl", "train_log.jsonl", "summary.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert!(log.lines().filter(|l| l.contains("\"stage\":2")).all(|l| !l.contains("l_sum") && !l.contains("l_cross")));

    ok(d, &["--out", "pred.tsv", "predict", "--checkpoint", "run/checkpoint.json", "--data", "data", "--split", "dev"]);
    let pred = fs::read_to_string(d.join("pred.tsv")).unwrap();
    assert!(pred.lines().all(|l| l.split('\t').count() == 3 && l.split('\t').nth(1).unwrap().starts_with('P')));

    let table = ok(d, &["--out", "score.json", "score", "--task", "guessing", "--gold", "data", "--split", "dev", "--pred", "pred.tsv"]);
    assert!(table.contains("micro"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("score.json")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(report["classification"]["micro"], summary["dev"]["micro"]);

    // gold written as a file scores identically to itself
    ok(d, &["score", "--task", "guessing", "--gold", "pred.tsv", "--pred", "pred.tsv", "--out", "self.json"]);
    let selfscore: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("self.json")).unwrap()).unwrap();
    assert_eq!(selfscore["classification"]["micro"]["f1"], 1.0);
}

#[test]
fn metric_history_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "guessing");
    train(d, "guessing", "7", "a");
    train(d, "guessing", "7", "b");
    let a = fs::read(d.join("a/metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, fs::read(d.join("b/metrics.jsonl")).unwrap());
    assert_eq!(fs::read(d.join("a/train_log.jsonl")).unwrap(), fs::read(d.join("b/train_log.jsonl")).unwrap());
}

#[test]
fn linking_clusters_and_coref_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "linking");
    train(d, "linking", "1", "run");
    ok(
        d,
        &["--out", "pred.tsv", "predict", "--checkpoint", "run/checkpoint.json", "--data", "data", "--clusters", "clusters.tsv"],
    );
    let clusters = fs::read_to_string(d.join("clusters.tsv")).unwrap();
    assert!(!clusters.is_empty());
    ok(d, &["score", "--task", "coref", "--gold", "data", "--pred", "clusters.tsv"]);
    ok(d, &["score", "--task", "linking", "--gold", "data", "--pred", "pred.tsv"]);

    // pred = gold gives perfect scores
    fs::write(d.join("gold.tsv"), "s\t0\ta\ns\t1\ta\ns\t2\tb\n").unwrap();
    let table = ok(d, &["--out", "r.json", "score", "--task", "coref", "--gold", "gold.tsv", "--pred", "gold.tsv"]);
    assert!(table.contains("BLANC"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    for m in ["b3", "ceaf_phi4", "blanc"] {
        assert_eq!(r["coref"][m]["f1"], 1.0, "{m}");
    }
}

#[test]
fn anchor_clusters_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("gold.tsv"), "s\t0\tx\ns\t1\tx\ns\t2\ty\n").unwrap();
    fs::write(d.join("pred.tsv"), "s\t0\t0\ns\t1\t1\ns\t2\t2\n").unwrap();
    ok(d, &["--out", "r.json", "score", "--task", "coref", "--gold", "gold.tsv", "--pred", "pred.tsv"]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    let f1 = |m: &str| r["coref"][m]["f1"].as_f64().unwrap();
    assert!((f1("b3") - 0.8).abs() < 1e-12);
    assert!((f1("ceaf_phi4") - 2.0 / 3.0).abs() < 1e-12);
    assert!((f1("blanc") - 0.4).abs() < 1e-12);

    fs::write(d.join("other.tsv"), "s\t0\tx\ns\t3\tx\ns\t2\ty\n").unwrap();
    let err = fail(d, &["score", "--task", "coref", "--gold", "gold.tsv", "--pred", "other.tsv"]);
    assert!(err.contains("mention universes differ"), "{err}");
    fs::write(d.join("bad.tsv"), "s\t0\tx\ns\tone\tx\n").unwrap();
    let err = fail(d, &["score", "--task", "coref", "--gold", "gold.tsv", "--pred", "bad.tsv"]);
    assert!(err.contains("bad.tsv:2"), "{err}");
}

#[test]
fn config_errors_fail_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "guessing");
    let err = fail(
        d,
        &["--out", "run", "train", "--task", "guessing", "--data", "data", "--ratios.lambda", "0", "--ratios.alpha", "0", "--ratios.beta", "0"],
    );
    assert!(err.contains("no active loss"), "{err}");
    assert!(!d.join("run").exists());
    let err = fail(d, &["train", "--task", "guessing", "--data", "data", "--stage1.nope", "1"]);
    assert!(err.contains("nope"), "{err}");
    let err = fail(d, &["train", "--task", "guessing"]);
    assert!(err.contains("CHARCL_DATA_ROOT"), "{err}");

    fs::write(d.join("cfg.toml"), "task = \"guessing\"\n[stage1]\nlearning_rate = 0.001\nbatch_size = 4\nepochs = 1\n[stage2]\nlearning_rate = 0.001\nbatch_size = 2\nepochs = 1\n[model]\nhidden = 8\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_charcl"))
        .current_dir(d)
        .env("CHARCL_DATA_ROOT", d.join("data"))
        .args(["--config", "cfg.toml", "--out", "cfgrun", "train"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = fs::read_to_string(d.join("cfgrun/config.toml")).unwrap();
    assert!(saved.contains("hidden = 8"));
}

#[test]
fn export_and_evidence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "guessing");
    train(d, "guessing", "2", "run");
    let out = charcl(
        d,
        &["--out", "emb.tsv", "export-embeddings", "--checkpoint", "run/checkpoint.json", "--data", "data", "--split", "train", "--per-character", "2"],
    );
    assert!(out.status.success());
    let emb = fs::read_to_string(d.join("emb.tsv")).unwrap();
    let mut lines = emb.lines();
    assert_eq!(lines.next().unwrap().split('\t').count(), 3 + 8);
    let mut per: std::collections::BTreeMap<String, Vec<String>> = Default::default();
    for l in lines {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 11);
        per.entry(f[0].to_string()).or_default().push(f[1].to_string());
    }
    for samples in per.values() {
        assert_eq!(samples.len(), 2);
        assert_ne!(samples[0], samples[1]);
    }

    ok(d, &["--out", "pred.tsv", "predict", "--checkpoint", "run/checkpoint.json", "--data", "data", "--split", "dev"]);
    let pred = fs::read_to_string(d.join("pred.tsv")).unwrap();
    let first: Vec<&str> = pred.lines().next().unwrap().split('\t').collect();
    fs::write(d.join("ann.tsv"), format!("{}\t{}\texclusion\n", first[0], first[1])).unwrap();
    let table = ok(d, &["--out", "ev.json", "evidence-breakdown", "--pred", "pred.tsv", "--gold", "data", "--split", "dev", "--annotations", "ann.tsv"]);
    assert!(table.contains("global_in_depth"));
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev.json")).unwrap()).unwrap();
    assert_eq!(ev["dropped"], 1);
    fs::write(d.join("ann.tsv"), "nowhere\tP0\tmemory\n").unwrap();
    let err = fail(d, &["evidence-breakdown", "--pred", "pred.tsv", "--gold", "data", "--split", "dev", "--annotations", "ann.tsv"]);
    assert!(err.contains("no prediction"), "{err}");
}

#[test]
fn incompatible_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "guessing");
    train(d, "guessing", "2", "run");
    ok(d, &["--seed", "1", "--out", "other", "gen-synthetic", "--n_characters", "6", "--n_scenes", "10"]);
    let err = fail(d, &["predict", "--checkpoint", "run/checkpoint.json", "--data", "other"]);
    assert!(err.contains("incompatible checkpoint"), "{err}");
    fs::write(d.join("junk.json"), "{}").unwrap();
    let err = fail(d, &["predict", "--checkpoint", "junk.json", "--data", "data"]);
    assert!(err.contains("incompatible checkpoint"), "{err}");
}
