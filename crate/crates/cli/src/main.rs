//! `charcl`: train, predict, score and report on character-centric script
//! corpora.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use charcl_core::data::validate_corpus;
use charcl_core::report::{
    evidence_breakdown, export_embeddings, embeddings_tsv, gold_cluster_rows, gold_labels, parse_clusters,
    parse_evidence, parse_labels, prediction_rows, score_clusters, score_labels, write_clusters, write_labels,
    clustering_rows, ExportSource, LabelRow,
};
use charcl_core::trainer::{predict, train, LogRecord};
use charcl_core::{
    generate_synthetic_corpus, load_corpus, write_corpus, Checkpoint, Corpus, CorpusFormat, Split, SyntheticSpec, Task,
    TrainConfig,
};

/// Default corpus directory when neither `--data` nor the config names one.
const DATA_ROOT_ENV: &str = "CHARCL_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "charcl", version, about = "Character embeddings from scripts: training, prediction and scoring")]
struct Cli {
    /// Random seed (training, sampling, synthetic generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-stage training. Any config key can be overridden with
    /// `--key value` after the named flags, e.g. `--stage1.epochs 5`.
    Train(TrainArgs),
    /// Predict linking labels, guessed speakers or clusters for a split.
    Predict(PredictArgs),
    /// Score predictions against gold labels or clusters.
    Score(ScoreArgs),
    /// Write character embeddings as a tab-separated table.
    ExportEmbeddings(ExportArgs),
    /// Guessing accuracy per merged evidence type.
    EvidenceBreakdown(EvidenceArgs),
    /// Generate a synthetic corpus. Generator fields can be overridden with
    /// `--key value`, e.g. `--n_scenes 50`.
    GenSynthetic(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// linking, coref or guessing (required without --config).
    #[arg(long)]
    task: Option<Task>,
    /// Corpus directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write derived clusters here (linking checkpoints).
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    task: Task,
    /// Gold file, or a corpus directory to read gold labels from.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Split used when `--gold` is a corpus directory.
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    split: Split,
    /// Rows kept per character, drawn from distinct samples where possible.
    #[arg(long)]
    per_character: Option<usize>,
    /// conversation, summary or both.
    #[arg(long, default_value = "conversation")]
    source: ExportSource,
}

#[derive(Args, Debug)]
struct EvidenceArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Gold label file, or a guessing corpus directory.
    #[arg(long)]
    gold: PathBuf,
    /// `scene_id TAB slot TAB category` file.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// guessing or linking.
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

/// Reads `--key value` and `--key=value` pairs.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("unexpected argument {arg:?}; overrides look like --key value"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("--{key} needs a value"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn data_dir(flag: Option<&Path>, config: Option<&str>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = config {
        return Ok(PathBuf::from(p));
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("no corpus directory: pass --data or set {DATA_ROOT_ENV}"))
}

fn load(dir: &Path, format: CorpusFormat) -> Result<Corpus> {
    load_corpus(dir, format).map_err(|first| {
        let all = validate_corpus(dir, format);
        let mut msg = format!("invalid corpus {}: {first}", dir.display());
        for e in all.iter().skip(1).take(20) {
            msg.push_str(&format!("\n  {e}"));
        }
        anyhow!(msg)
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_toml(&read(p)?).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::preset(args.task.ok_or_else(|| anyhow!("--task is required without --config"))?),
    };
    if let (Some(t), Some(_)) = (args.task, &cli.config) {
        cfg.task = t;
    }
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dir = data_dir(args.data.as_deref(), cfg.data.as_deref())?;
    let corpus = load(&dir, cfg.task.corpus_format())?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.task, cfg.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;

    let mut log = String::new();
    let mut history = String::new();
    let outcome = train(&cfg, &corpus, Some(&out.join("checkpoint.json")), &mut |r| {
        let line = serde_json::to_string(r).expect("log record serializes");
        log.push_str(&line);
        log.push('\n');
        if let LogRecord::Epoch(e) = r {
            history.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            history.push('\n');
            eprintln!(
                "stage {} epoch {:>3}  loss {:.4}  dev micro-F1 {:.2}{}",
                e.stage,
                e.epoch,
                e.mean_total,
                100.0 * e.dev.micro.f1,
                if e.best { "  *" } else { "" }
            );
        }
    })?;
    fs::write(out.join("train_log.jsonl"), log)?;
    fs::write(out.join("metrics.jsonl"), history)?;
    let summary = serde_json::json!({
        "best_stage": outcome.best_epoch.0,
        "best_epoch": outcome.best_epoch.1,
        "dev": outcome.best_dev,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    eprintln!(
        "best dev {:.2} at stage {} epoch {}; artifacts in {}",
        100.0 * outcome.best_dev.selection_score(),
        outcome.best_epoch.0,
        outcome.best_epoch.1,
        out.display()
    );
    Ok(())
}

fn cmd_predict(cli: &Cli, args: &PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let dir = data_dir(args.data.as_deref(), ck.config.as_ref().and_then(|c| c.data.as_deref()))?;
    let corpus = load(&dir, model.task.corpus_format())?;
    model.check_registry(&corpus.registry)?;
    let preds = corpus
        .split(args.split)
        .map(|s| predict(model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let cluster_text = || {
        let rows: Vec<_> = preds
            .iter()
            .filter_map(|p| p.clusters.as_ref().map(|c| clustering_rows(&p.scene_id, c)))
            .flatten()
            .collect();
        write_clusters(&rows)
    };
    if model.task == Task::Coref {
        write_out(cli.out.as_deref(), &cluster_text())?;
    } else {
        write_out(cli.out.as_deref(), &write_labels(&prediction_rows(model.task, &model.registry, &preds)))?;
    }
    if let Some(p) = &args.clusters {
        if model.task == Task::Guessing {
            bail!("--clusters needs a linking or coref checkpoint");
        }
        write_out(Some(p), &cluster_text())?;
    }
    Ok(())
}

/// Gold labels from a file, or from a corpus directory for `split`.
fn gold_label_rows(path: &Path, task: Task, split: Split) -> Result<(Vec<LabelRow>, Option<Vec<String>>)> {
    if path.is_dir() {
        let corpus = load(path, task.corpus_format())?;
        Ok((gold_labels(&corpus, split), Some(corpus.registry.names().to_vec())))
    } else {
        Ok((parse_labels(&path.display().to_string(), &read(path)?)?, None))
    }
}

fn cmd_score(cli: &Cli, args: &ScoreArgs) -> Result<()> {
    let pred_text = read(&args.pred)?;
    let pred_name = args.pred.display().to_string();
    let report = if args.task == Task::Coref {
        let gold = if args.gold.is_dir() {
            gold_cluster_rows(&load(&args.gold, CorpusFormat::LinkingCoref)?, args.split)
        } else {
            parse_clusters(&args.gold.display().to_string(), &read(&args.gold)?)?
        };
        score_clusters(&gold, &parse_clusters(&pred_name, &pred_text)?)?
    } else {
        let (gold, classes) = gold_label_rows(&args.gold, args.task, args.split)?;
        score_labels(args.task, &gold, &parse_labels(&pred_name, &pred_text)?, classes.as_deref())?
    };
    print!("{}", report.to_table());
    if let Some(out) = &cli.out {
        write_out(Some(out), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn cmd_export(cli: &Cli, args: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let dir = data_dir(args.data.as_deref(), ck.config.as_ref().and_then(|c| c.data.as_deref()))?;
    let corpus = load(&dir, model.task.corpus_format())?;
    model.check_registry(&corpus.registry)?;
    let export = export_embeddings(model, &corpus, args.split, args.source, args.per_character, cli.seed.unwrap_or(0))?;
    for w in &export.warnings {
        eprintln!("warning: {w}");
    }
    write_out(cli.out.as_deref(), &embeddings_tsv(&model.registry, &export.rows))
}

fn cmd_evidence(cli: &Cli, args: &EvidenceArgs) -> Result<()> {
    let pred = parse_labels(&args.pred.display().to_string(), &read(&args.pred)?)?;
    let (gold, _) = gold_label_rows(&args.gold, Task::Guessing, args.split)?;
    let ann = parse_evidence(&args.annotations.display().to_string(), &read(&args.annotations)?)?;
    let report = evidence_breakdown(&pred, &gold, &ann)?;
    print!("{}", report.to_table());
    if let Some(out) = &cli.out {
        write_out(Some(out), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &cli.config {
        Some(p) => toml::from_str(&read(p)?).with_context(|| format!("config {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(f) = args.format {
        spec.format = f;
    }
    for (k, v) in parse_overrides(&args.overrides)? {
        spec.set(&k, &v)?;
    }
    let out = cli.out.clone().ok_or_else(|| anyhow!("gen-synthetic needs --out DIR"))?;
    let corpus = generate_synthetic_corpus(&spec, cli.seed.unwrap_or(0))?;
    write_corpus(&out, &corpus)?;
    eprintln!(
        "wrote {} scenes, {} characters to {}",
        corpus.scenes.len(),
        corpus.registry.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Predict(a) => cmd_predict(cli, a),
        Command::Score(a) => cmd_score(cli, a),
        Command::ExportEmbeddings(a) => cmd_export(cli, a),
        Command::EvidenceBreakdown(a) => cmd_evidence(cli, a),
        Command::GenSynthetic(a) => cmd_synth(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
