//! Tab-separated prediction, clustering and annotation files, score reports,
//! embedding export and the evidence-type breakdown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Graph;
use crate::data::{Corpus, Split};
use crate::encoding::{CharacterEmbedding, EmbeddingSource};
use crate::metrics::{micro_macro_f1, ClassificationScores, Clustering, CorefCounts, CorefScores, GoldPredPair, MetricError, Prf};
use crate::trainer::{gold_clusters, reserved_ids, Model, ScenePrediction, Task, TrainError};

#[derive(Debug, Error, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum ReportError {
    #[error("{file}:{line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("scene {scene_id}: {source}")]
    Metric { scene_id: String, source: MetricError },
    #[error(transparent)]
    Scores(MetricError),
    #[error("no prediction for scene {scene_id} item {key}")]
    MissingPrediction { scene_id: String, key: ItemKey },
    #[error("prediction for scene {scene_id} item {key} has no gold label")]
    UnexpectedPrediction { scene_id: String, key: ItemKey },
    #[error("unknown character {0:?}")]
    UnknownCharacter(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Second column of a prediction file: a guessing slot (`P3`) or a mention
/// id (`3`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ItemKey {
    Slot(usize),
    Mention(usize),
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemKey::Slot(s) => write!(f, "P{s}"),
            ItemKey::Mention(m) => write!(f, "{m}"),
        }
    }
}

impl FromStr for ItemKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected a mention id or slot like P0, got {s:?}");
        match s.strip_prefix('P') {
            Some(n) => n.parse().map(ItemKey::Slot).map_err(|_| bad()),
            None => s.parse().map(ItemKey::Mention).map_err(|_| bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelRow {
    pub scene_id: String,
    pub key: ItemKey,
    pub character: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterRow {
    pub scene_id: String,
    pub mention_id: usize,
    pub cluster_id: String,
}

/// Splits `text` into non-empty, non-comment lines of exactly `n` tab
/// separated fields, yielding the 1-based line number with each.
fn tsv_lines<'a>(file: &'a str, text: &'a str, n: usize) -> impl Iterator<Item = Result<(usize, Vec<&'a str>), ReportError>> + 'a {
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            return None;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        Some(if fields.len() == n {
            Ok((i + 1, fields))
        } else {
            Err(ReportError::Parse {
                file: file.to_string(),
                line: i + 1,
                reason: format!("expected {n} tab-separated fields, found {}", fields.len()),
            })
        })
    })
}

fn parse_err(file: &str, line: usize, reason: impl Into<String>) -> ReportError {
    ReportError::Parse {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

/// Parses `scene_id\tslot_or_mention\tcharacter` lines. Duplicate items are
/// rejected.
pub fn parse_labels(file: &str, text: &str) -> Result<Vec<LabelRow>, ReportError> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for item in tsv_lines(file, text, 3) {
        let (line, f) = item?;
        let key: ItemKey = f[1].parse().map_err(|e: String| parse_err(file, line, e))?;
        if f[0].is_empty() || f[2].is_empty() {
            return Err(parse_err(file, line, "empty field"));
        }
        if !seen.insert((f[0], key)) {
            return Err(parse_err(file, line, format!("duplicate item {} {key}", f[0])));
        }
        rows.push(LabelRow {
            scene_id: f[0].to_string(),
            key,
            character: f[2].to_string(),
        });
    }
    Ok(rows)
}

pub fn write_labels(rows: &[LabelRow]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.scene_id, r.key, r.character).expect("string write");
    }
    out
}

/// Parses `scene_id\tmention_id\tcluster_id` lines.
pub fn parse_clusters(file: &str, text: &str) -> Result<Vec<ClusterRow>, ReportError> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for item in tsv_lines(file, text, 3) {
        let (line, f) = item?;
        let mention_id: usize = f[1]
            .parse()
            .map_err(|_| parse_err(file, line, format!("mention id must be a non-negative integer, got {:?}", f[1])))?;
        if f[0].is_empty() || f[2].is_empty() {
            return Err(parse_err(file, line, "empty field"));
        }
        if !seen.insert((f[0], mention_id)) {
            return Err(parse_err(file, line, format!("duplicate mention {} {mention_id}", f[0])));
        }
        rows.push(ClusterRow {
            scene_id: f[0].to_string(),
            mention_id,
            cluster_id: f[2].to_string(),
        });
    }
    Ok(rows)
}

pub fn write_clusters(rows: &[ClusterRow]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.scene_id, r.mention_id, r.cluster_id).expect("string write");
    }
    out
}

/// Groups cluster rows into one clustering per scene.
pub fn clusterings(rows: &[ClusterRow]) -> BTreeMap<String, Clustering> {
    let mut by: BTreeMap<&str, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for r in rows {
        by.entry(&r.scene_id).or_default().entry(&r.cluster_id).or_default().push(r.mention_id);
    }
    by.into_iter()
        .map(|(s, cs)| (s.to_string(), Clustering(cs.into_values().collect())))
        .collect()
}

pub fn clustering_rows(scene_id: &str, c: &Clustering) -> Vec<ClusterRow> {
    let mut rows: Vec<ClusterRow> = c
        .0
        .iter()
        .enumerate()
        .flat_map(|(i, ms)| {
            ms.iter().map(move |&m| ClusterRow {
                scene_id: scene_id.to_string(),
                mention_id: m,
                cluster_id: i.to_string(),
            })
        })
        .collect();
    rows.sort_by_key(|r| r.mention_id);
    rows
}

/// Gold labels of a split: slot speakers for guessing corpora, mention
/// referents otherwise. Unlabeled slots are skipped.
pub fn gold_labels(corpus: &Corpus, split: Split) -> Vec<LabelRow> {
    let name = |c| corpus.registry.name(c).expect("registry id").to_string();
    let mut rows = Vec::new();
    for scene in corpus.split(split) {
        if corpus.is_guessing() {
            for slot in scene.anonymous_slots() {
                if let Some(&c) = scene.speaker_labels.get(&slot) {
                    rows.push(LabelRow {
                        scene_id: scene.scene_id.clone(),
                        key: ItemKey::Slot(slot),
                        character: name(c),
                    });
                }
            }
        } else {
            for m in &scene.mentions {
                rows.push(LabelRow {
                    scene_id: scene.scene_id.clone(),
                    key: ItemKey::Mention(m.mention_id),
                    character: name(m.gold),
                });
            }
        }
    }
    rows
}

pub fn gold_cluster_rows(corpus: &Corpus, split: Split) -> Vec<ClusterRow> {
    let reserved = reserved_ids(corpus.registry.names());
    corpus
        .split(split)
        .filter(|s| !s.mentions.is_empty())
        .flat_map(|s| clustering_rows(&s.scene_id, &gold_clusters(s, &reserved)))
        .collect()
}

/// Label rows for model predictions; guessing items are keyed by slot.
pub fn prediction_rows(task: Task, registry: &[String], preds: &[ScenePrediction]) -> Vec<LabelRow> {
    preds
        .iter()
        .flat_map(|p| {
            p.items.iter().map(move |i| LabelRow {
                scene_id: p.scene_id.clone(),
                key: match task {
                    Task::Guessing => ItemKey::Slot(i.key),
                    _ => ItemKey::Mention(i.key),
                },
                character: registry[i.predicted.0].clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: Task,
    /// Scored items (classification) or mentions (coreference).
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coref: Option<CorefScores>,
}

/// Micro/macro scores of predicted against gold labels. Every gold item must
/// be predicted and every prediction must have a gold item. Class ids follow
/// `classes` when given, otherwise the sorted union of names.
pub fn score_labels(task: Task, gold: &[LabelRow], pred: &[LabelRow], classes: Option<&[String]>) -> Result<ScoreReport, ReportError> {
    let pred_map: BTreeMap<(&str, ItemKey), &str> = pred.iter().map(|r| ((r.scene_id.as_str(), r.key), r.character.as_str())).collect();
    let gold_keys: BTreeSet<(&str, ItemKey)> = gold.iter().map(|r| (r.scene_id.as_str(), r.key)).collect();
    if let Some((s, k)) = pred_map.keys().find(|k| !gold_keys.contains(k)) {
        return Err(ReportError::UnexpectedPrediction {
            scene_id: s.to_string(),
            key: *k,
        });
    }
    let names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => gold
            .iter()
            .chain(pred)
            .map(|r| r.character.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let id = |n: &str| index.get(n).copied().ok_or_else(|| ReportError::UnknownCharacter(n.to_string()));
    let (mut g, mut p) = (Vec::with_capacity(gold.len()), Vec::with_capacity(gold.len()));
    for r in gold {
        let predicted = pred_map.get(&(r.scene_id.as_str(), r.key)).ok_or_else(|| ReportError::MissingPrediction {
            scene_id: r.scene_id.clone(),
            key: r.key,
        })?;
        g.push(id(&r.character)?);
        p.push(id(predicted)?);
    }
    let scores = micro_macro_f1(&g, &p, names.len()).map_err(ReportError::Scores)?;
    Ok(ScoreReport {
        task,
        items: g.len(),
        classification: Some(scores),
        coref: None,
    })
}

/// Coreference scores summed over scenes. Both files must cover the same
/// scenes and, per scene, the same mentions.
pub fn score_clusters(gold: &[ClusterRow], pred: &[ClusterRow]) -> Result<ScoreReport, ReportError> {
    let gold = clusterings(gold);
    let mut pred = clusterings(pred);
    let mut counts = CorefCounts::default();
    for (scene_id, g) in &gold {
        let p = pred.remove(scene_id).unwrap_or_default();
        let pair = GoldPredPair::new(g, &p).map_err(|source| ReportError::Metric {
            scene_id: scene_id.clone(),
            source,
        })?;
        counts.add(&CorefCounts::of(&pair));
    }
    if let Some((scene_id, p)) = pred.into_iter().next() {
        return Err(ReportError::Metric {
            scene_id,
            source: MetricError::MentionUniverseMismatch {
                only_gold: 0,
                only_pred: p.mentions(),
            },
        });
    }
    Ok(ScoreReport {
        task: Task::Coref,
        items: counts.mentions as usize,
        classification: None,
        coref: Some(counts.scores().map_err(ReportError::Scores)?),
    })
}

fn prf_row(out: &mut String, name: &str, p: &Prf) {
    writeln!(
        out,
        "{name:<10} {:>9.2} {:>9.2} {:>9.2}",
        100.0 * p.precision,
        100.0 * p.recall,
        100.0 * p.f1
    )
    .expect("string write");
}

impl ScoreReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "task: {}  items: {}", self.task, self.items).expect("string write");
        writeln!(out, "{:<10} {:>9} {:>9} {:>9}", "metric", "P", "R", "F1").expect("string write");
        if let Some(c) = &self.classification {
            prf_row(&mut out, "micro", &c.micro);
            prf_row(&mut out, "macro", &c.macro_avg);
        }
        if let Some(c) = &self.coref {
            prf_row(&mut out, "B3", &c.b3);
            prf_row(&mut out, "CEAF-phi4", &c.ceaf_phi4);
            prf_row(&mut out, "BLANC", &c.blanc);
            writeln!(out, "{:<10} {:>29.2}", "avg F1", 100.0 * c.conll_avg).expect("string write");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceCategory {
    Attribute,
    Relation,
    Status,
    Background,
    Exclusion,
    Mention,
    Linguistic,
    Memory,
    Personality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceBucket {
    GlobalInDepth,
    LocalTextual,
    Dropped,
}

impl EvidenceCategory {
    pub const ALL: [EvidenceCategory; 9] = [
        EvidenceCategory::Attribute,
        EvidenceCategory::Relation,
        EvidenceCategory::Status,
        EvidenceCategory::Background,
        EvidenceCategory::Exclusion,
        EvidenceCategory::Mention,
        EvidenceCategory::Linguistic,
        EvidenceCategory::Memory,
        EvidenceCategory::Personality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceCategory::Attribute => "attribute",
            EvidenceCategory::Relation => "relation",
            EvidenceCategory::Status => "status",
            EvidenceCategory::Background => "background",
            EvidenceCategory::Exclusion => "exclusion",
            EvidenceCategory::Mention => "mention",
            EvidenceCategory::Linguistic => "linguistic",
            EvidenceCategory::Memory => "memory",
            EvidenceCategory::Personality => "personality",
        }
    }

    pub fn bucket(self) -> EvidenceBucket {
        use EvidenceCategory::*;
        match self {
            Attribute | Relation | Status | Linguistic | Memory | Personality => EvidenceBucket::GlobalInDepth,
            Background | Mention => EvidenceBucket::LocalTextual,
            Exclusion => EvidenceBucket::Dropped,
        }
    }
}

impl FromStr for EvidenceCategory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        // "linguistics" appears as a variant spelling in annotation sets
        let s = if s == "linguistics" { "linguistic".to_string() } else { s };
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown evidence category {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub scene_id: String,
    pub slot: ItemKey,
    pub category: EvidenceCategory,
}

/// Parses `scene_id\tslot\tcategory` annotation lines.
pub fn parse_evidence(file: &str, text: &str) -> Result<Vec<EvidenceRow>, ReportError> {
    tsv_lines(file, text, 3)
        .map(|item| {
            let (line, f) = item?;
            Ok(EvidenceRow {
                scene_id: f[0].to_string(),
                slot: f[1].parse().map_err(|e: String| parse_err(file, line, e))?,
                category: f[2].parse().map_err(|e: String| parse_err(file, line, e))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub items: usize,
    pub correct: usize,
    /// `None` for an empty bucket.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub annotated: usize,
    pub dropped: usize,
    pub global_in_depth: BucketAccuracy,
    pub local_textual: BucketAccuracy,
    /// Raw counts per fine category, including dropped ones.
    pub by_category: BTreeMap<EvidenceCategory, BucketAccuracy>,
}

fn tally(b: &mut BucketAccuracy, ok: bool) {
    b.items += 1;
    b.correct += usize::from(ok);
    b.accuracy = Some(b.correct as f64 / b.items as f64);
}

/// Per-bucket guessing accuracy. Every annotated item must be predicted and
/// have a gold label.
pub fn evidence_breakdown(pred: &[LabelRow], gold: &[LabelRow], annotations: &[EvidenceRow]) -> Result<EvidenceReport, ReportError> {
    let index = |rows: &[LabelRow]| -> BTreeMap<(String, ItemKey), String> {
        rows.iter().map(|r| ((r.scene_id.clone(), r.key), r.character.clone())).collect()
    };
    let (pred, gold) = (index(pred), index(gold));
    let mut report = EvidenceReport {
        annotated: annotations.len(),
        dropped: 0,
        global_in_depth: BucketAccuracy::default(),
        local_textual: BucketAccuracy::default(),
        by_category: BTreeMap::new(),
    };
    for a in annotations {
        let k = (a.scene_id.clone(), a.slot);
        let missing = || ReportError::MissingPrediction {
            scene_id: a.scene_id.clone(),
            key: a.slot,
        };
        let p = pred.get(&k).ok_or_else(missing)?;
        let g = gold.get(&k).ok_or_else(missing)?;
        let ok = p == g;
        tally(report.by_category.entry(a.category).or_default(), ok);
        match a.category.bucket() {
            EvidenceBucket::GlobalInDepth => tally(&mut report.global_in_depth, ok),
            EvidenceBucket::LocalTextual => tally(&mut report.local_textual, ok),
            EvidenceBucket::Dropped => report.dropped += 1,
        }
    }
    Ok(report)
}

impl EvidenceReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "annotated: {}  dropped: {}", self.annotated, self.dropped).expect("string write");
        let row = |out: &mut String, name: &str, b: &BucketAccuracy| {
            let acc = b.accuracy.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
            writeln!(out, "{name:<16} {:>6} {:>8} {:>9}", b.items, b.correct, acc).expect("string write");
        };
        writeln!(out, "{:<16} {:>6} {:>8} {:>9}", "bucket", "items", "correct", "accuracy").expect("string write");
        row(&mut out, "global_in_depth", &self.global_in_depth);
        row(&mut out, "local_textual", &self.local_textual);
        for (c, b) in &self.by_category {
            row(&mut out, &format!("  {}", c.as_str()), b);
        }
        out
    }
}

/// Which embeddings to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportSource {
    Conversation,
    Summary,
    Both,
}

impl FromStr for ExportSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conversation" => Ok(Self::Conversation),
            "summary" => Ok(Self::Summary),
            "both" => Ok(Self::Both),
            _ => Err(format!("expected conversation, summary or both, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub rows: Vec<CharacterEmbedding>,
    pub warnings: Vec<String>,
}

/// Refined embeddings of labeled characters in `split`; `sample_index` is the
/// scene's position within the split. With `per_character`, each character
/// keeps at most that many rows, preferring distinct samples.
pub fn export_embeddings(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    source: ExportSource,
    per_character: Option<usize>,
    seed: u64,
) -> Result<EmbeddingExport, ReportError> {
    let mut all = Vec::new();
    for (i, scene) in corpus.split(split).enumerate() {
        let enc = |e| TrainError::Encoding {
            scene_id: scene.scene_id.clone(),
            source: e,
        };
        let mut g = Graph::new(&model.store);
        if source != ExportSource::Summary {
            if let Some(b) = model.conversation(&mut g, scene, i).map_err(enc)? {
                all.extend(b.materialize(&g));
            }
        }
        if source != ExportSource::Conversation {
            if let Some(summary) = corpus.summary_for(scene) {
                if let Some(b) = model.summary(&mut g, summary, i).map_err(enc)? {
                    all.extend(b.materialize(&g));
                }
            }
        }
    }
    all.retain(|e| e.meta.character.is_some());
    let Some(n) = per_character else {
        return Ok(EmbeddingExport {
            rows: all,
            warnings: Vec::new(),
        });
    };
    let mut by: BTreeMap<usize, Vec<CharacterEmbedding>> = BTreeMap::new();
    for e in all {
        by.entry(e.meta.character.expect("retained").0).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (c, mut items) in by {
        items.shuffle(&mut rng);
        if items.len() < n {
            warnings.push(format!(
                "{}: requested {n} embeddings, only {} available",
                model.registry[c],
                items.len()
            ));
        }
        // first one item per sample, then fill from repeats
        let mut used = BTreeSet::new();
        let (fresh, repeats): (Vec<_>, Vec<_>) = items.into_iter().partition(|e| used.insert(e.meta.sample_index));
        let mut chosen: Vec<CharacterEmbedding> = fresh.into_iter().chain(repeats).take(n).collect();
        chosen.sort_by_key(|e| (e.meta.sample_index, e.meta.source == EmbeddingSource::Summary, e.meta.key));
        rows.extend(chosen);
    }
    Ok(EmbeddingExport { rows, warnings })
}

/// Header plus one tab-separated row per embedding.
pub fn embeddings_tsv(registry: &[String], rows: &[CharacterEmbedding]) -> String {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("character\tsample_index\tsource");
    for j in 0..d {
        write!(out, "\td{j}").expect("string write");
    }
    out.push('\n');
    for r in rows {
        let name = r.meta.character.map_or("", |c| registry[c.0].as_str());
        write!(out, "{name}\t{}\t{}", r.meta.sample_index, r.meta.source.as_str()).expect("string write");
        for v in &r.vector {
            write!(out, "\t{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}
