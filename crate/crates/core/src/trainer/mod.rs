//! Two-stage training, evaluation, prediction and checkpoints.
//!
//! Stage 1 minimizes `lambda * L_sup + alpha * L_sum + beta * L_cross`;
//! stage 2 minimizes `L_sup` alone. Coreference clusters are always derived
//! from linking predictions.

mod config;
mod model;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{AdamConfig, ModelConfig, StageConfig, Task, TaskRatios, TrainConfig};
pub use model::{Checkpoint, CheckpointMeta, Model, ParamManifestEntry, CHECKPOINT_FORMAT};
pub use optim::Adam;

use crate::autograd::{Graph, NodeId};
use crate::data::{align_characters, CharacterId, Corpus, Scene, Split, Summary, GENERAL_NAME, OTHER_NAME};
use crate::encoding::{EmbeddingBatch, EncodingError};
use crate::metrics::{micro_macro_f1, Clustering, CorefCounts, CorefScores, GoldPredPair, MetricError, Prf};
use crate::objectives::{
    info_nce_graph, sample_cross_pairs, sample_summary_conversation_pairs, supervised_loss_graph, ContrastiveConfig,
    ObjectiveError,
};
use crate::tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no active loss: every task ratio is zero")]
    NoActiveLoss,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("corpus has no usable {0} scenes")]
    MissingSplit(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("failed to write checkpoint {path}: {message}")]
    CheckpointWriteFailure { path: String, message: String },
    #[error("no prediction for mention {0}")]
    MissingPrediction(usize),
    #[error("scene {scene_id}: {source}")]
    Encoding { scene_id: String, source: EncodingError },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Ids of reserved registry entries, which never form contrastive pairs or
/// coreference clusters.
pub fn reserved_ids(names: &[String]) -> Vec<CharacterId> {
    names
        .iter()
        .enumerate()
        .filter(|(_, n)| *n == OTHER_NAME || *n == GENERAL_NAME)
        .map(|(i, _)| CharacterId(i))
        .collect()
}

/// A scene with its optional summary and the characters shared by both.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub scene: &'a Scene,
    pub summary: Option<&'a Summary>,
    pub shared: Vec<CharacterId>,
}

pub fn samples(corpus: &Corpus, split: Split) -> Vec<Sample<'_>> {
    corpus
        .split(split)
        .map(|scene| match corpus.summary_for(scene) {
            Some(summary) => Sample {
                scene,
                summary: Some(summary),
                shared: align_characters(scene, summary, &corpus.registry).shared_characters,
            },
            None => Sample {
                scene,
                summary: None,
                shared: Vec::new(),
            },
        })
        .collect()
}

/// Loss terms of one step. Absent terms were not computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub l_sup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_sum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_cross: Option<f64>,
    /// Samples that contributed to `l_sum` (0 means the term was zero).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sum_samples: Option<usize>,
    /// Characters paired across samples for `l_cross`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_pairs: Option<usize>,
}

fn enc_err(scene: &Scene) -> impl Fn(EncodingError) -> TrainError + '_ {
    move |source| TrainError::Encoding {
        scene_id: scene.scene_id.clone(),
        source,
    }
}

/// Builds the batch objective on `g`. `ratios = None` means stage 2
/// (supervised term only, unweighted).
pub fn batch_objective(
    g: &mut Graph,
    model: &Model,
    batch: &[Sample],
    ratios: Option<&TaskRatios>,
    contrastive: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<NodeId>, StepLosses), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (lambda, alpha, beta) = match ratios {
        Some(r) => {
            r.validate()?;
            (r.lambda, r.alpha, r.beta)
        }
        None => (1.0, 0.0, 0.0),
    };
    let mut conv: Vec<Option<EmbeddingBatch>> = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        conv.push(model.conversation(g, s.scene, i).map_err(enc_err(s.scene))?);
    }
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut out = StepLosses {
        total: 0.0,
        l_sup: None,
        l_sum: None,
        l_cross: None,
        sum_samples: None,
        cross_pairs: None,
    };

    if lambda > 0.0 {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for e in conv.iter().flatten() {
            let rows: Vec<usize> = (0..e.len()).filter(|&r| e.meta[r].character.is_some()).collect();
            if rows.is_empty() {
                continue;
            }
            labels.extend(rows.iter().map(|&r| e.meta[r].character.expect("labeled").0));
            parts.push(g.select_rows(e.vectors, &rows));
        }
        if parts.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let x = g.concat_rows(&parts);
        let logits = model.logits(g, x);
        let l = supervised_loss_graph(g, logits, &labels)?;
        out.l_sup = Some(g.scalar(l));
        terms.push((l, lambda));
    }

    if alpha > 0.0 {
        let mut per_sample = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            let (Some(c), Some(summary)) = (&conv[i], s.summary) else {
                continue;
            };
            if s.shared.is_empty() {
                continue;
            }
            let Some(sm) = model.summary(g, summary, i).map_err(enc_err(s.scene))? else {
                continue;
            };
            let pairs = sample_summary_conversation_pairs(&s.shared, &c.meta, &sm.meta, rng);
            if pairs.is_empty() {
                continue;
            }
            let a: Vec<usize> = pairs.iter().map(|p| p.anchor).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.positive).collect();
            let anchors = g.select_rows(c.vectors, &a);
            let positives = g.select_rows(sm.vectors, &p);
            per_sample.push(info_nce_graph(g, anchors, positives, contrastive)?);
        }
        out.sum_samples = Some(per_sample.len());
        if per_sample.is_empty() {
            out.l_sum = Some(0.0);
        } else {
            let w = 1.0 / per_sample.len() as f64;
            let weighted: Vec<(NodeId, f64)> = per_sample.iter().map(|&n| (n, w)).collect();
            let l = g.weighted_sum(&weighted);
            out.l_sum = Some(g.scalar(l));
            terms.push((l, alpha));
        }
    }

    if beta > 0.0 {
        let present: Vec<&EmbeddingBatch> = conv.iter().flatten().collect();
        let mut meta = Vec::new();
        for e in &present {
            meta.extend_from_slice(&e.meta);
        }
        let pairs = sample_cross_pairs(&meta, &reserved_ids(&model.registry), rng);
        out.cross_pairs = Some(pairs.len());
        if pairs.is_empty() {
            out.l_cross = Some(0.0);
        } else {
            let nodes: Vec<NodeId> = present.iter().map(|e| e.vectors).collect();
            let flat = if nodes.len() == 1 { nodes[0] } else { g.concat_rows(&nodes) };
            let a: Vec<usize> = pairs.iter().map(|p| p.anchor).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.positive).collect();
            let anchors = g.select_rows(flat, &a);
            let positives = g.select_rows(flat, &p);
            let l = info_nce_graph(g, anchors, positives, contrastive)?;
            out.l_cross = Some(g.scalar(l));
            terms.push((l, beta));
        }
    }

    if terms.is_empty() {
        return Ok((None, out));
    }
    let total = g.weighted_sum(&terms);
    out.total = g.scalar(total);
    Ok((Some(total), out))
}

fn apply(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[Sample],
    ratios: Option<&TaskRatios>,
    contrastive: &ContrastiveConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses, TrainError> {
    let (losses, grads): (StepLosses, Option<Vec<Matrix>>) = {
        let mut g = Graph::new(&model.store);
        let (total, losses) = batch_objective(&mut g, model, batch, ratios, contrastive, rng)?;
        (losses, total.map(|t| g.backward(t).into_param_grads(&model.store)))
    };
    if let Some(grads) = grads {
        adam.update(&mut model.store, &grads, lr);
    }
    Ok(losses)
}

/// One stage-1 update with the weighted objective.
pub fn stage_one_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[Sample],
    ratios: &TaskRatios,
    contrastive: &ContrastiveConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses, TrainError> {
    apply(model, adam, batch, Some(ratios), contrastive, lr, rng)
}

/// One stage-2 update on the supervised loss only.
pub fn stage_two_step(model: &mut Model, adam: &mut Adam, batch: &[Sample], lr: f64) -> Result<StepLosses, TrainError> {
    // the pair sampler is never consulted in stage 2
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    apply(model, adam, batch, None, &ContrastiveConfig::default(), lr, &mut unused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedItem {
    /// Mention id, or slot number for guessing.
    pub key: usize,
    pub gold: Option<CharacterId>,
    pub predicted: CharacterId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene_id: String,
    pub items: Vec<PredictedItem>,
    /// Clusters derived from linking output (linking and coref tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Clustering>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &Model, scene: &Scene) -> Result<ScenePrediction, TrainError> {
    let mut g = Graph::new(&model.store);
    let Some(conv) = model.conversation(&mut g, scene, 0).map_err(enc_err(scene))? else {
        return Ok(ScenePrediction {
            scene_id: scene.scene_id.clone(),
            items: Vec::new(),
            clusters: (model.task != Task::Guessing).then(Clustering::default),
        });
    };
    let logits = model.logits(&mut g, conv.vectors);
    let values = g.value(logits);
    let items: Vec<PredictedItem> = conv
        .meta
        .iter()
        .enumerate()
        .map(|(r, m)| PredictedItem {
            key: m.key,
            gold: m.character,
            predicted: CharacterId(argmax(values.row(r))),
        })
        .collect();
    let clusters = match model.task {
        Task::Guessing => None,
        Task::Linking | Task::Coref => {
            let preds: BTreeMap<usize, CharacterId> = items.iter().map(|i| (i.key, i.predicted)).collect();
            let ids: Vec<usize> = items.iter().map(|i| i.key).collect();
            Some(clusters_from_linking(&preds, &ids, &reserved_ids(&model.registry))?)
        }
    };
    Ok(ScenePrediction {
        scene_id: scene.scene_id.clone(),
        items,
        clusters,
    })
}

/// Groups mentions by predicted character. Mentions labeled with a reserved
/// entry each form their own singleton.
pub fn clusters_from_linking(
    preds: &BTreeMap<usize, CharacterId>,
    mentions: &[usize],
    reserved: &[CharacterId],
) -> Result<Clustering, TrainError> {
    let mut by: BTreeMap<CharacterId, Vec<usize>> = BTreeMap::new();
    let mut singles = Vec::new();
    for &m in mentions {
        let c = *preds.get(&m).ok_or(TrainError::MissingPrediction(m))?;
        if reserved.contains(&c) {
            singles.push(vec![m]);
        } else {
            by.entry(c).or_default().push(m);
        }
    }
    let mut clusters: Vec<Vec<usize>> = by.into_values().collect();
    clusters.extend(singles);
    Ok(Clustering(clusters))
}

/// Gold clustering of a scene's mentions under the same reserved-label rule.
pub fn gold_clusters(scene: &Scene, reserved: &[CharacterId]) -> Clustering {
    let gold: BTreeMap<usize, CharacterId> = scene.mentions.iter().map(|m| (m.mention_id, m.gold)).collect();
    let ids: Vec<usize> = scene.mentions.iter().map(|m| m.mention_id).collect();
    clusters_from_linking(&gold, &ids, reserved).expect("every mention has a gold label")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// Labeled items scored.
    pub items: usize,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coref: Option<CorefScores>,
}

impl EvalReport {
    /// Model selection criterion: BLANC F1 for coreference, micro F1
    /// otherwise.
    pub fn selection_score(&self) -> f64 {
        match (self.task, &self.coref) {
            (Task::Coref, Some(c)) => c.blanc.f1,
            _ => self.micro.f1,
        }
    }
}

pub fn evaluate(model: &Model, corpus: &Corpus, split: Split) -> Result<EvalReport, TrainError> {
    let preds = corpus
        .split(split)
        .map(|s| predict(model, s).map(|p| (s, p)))
        .collect::<Result<Vec<_>, _>>()?;
    score_predictions(model.task, corpus, &preds)
}

/// Scores predictions against the gold labels carried by each item.
pub fn score_predictions(task: Task, corpus: &Corpus, preds: &[(&Scene, ScenePrediction)]) -> Result<EvalReport, TrainError> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut counts = CorefCounts::default();
    let reserved = reserved_ids(corpus.registry.names());
    for (scene, p) in preds {
        for item in &p.items {
            if let Some(g) = item.gold {
                gold.push(g.0);
                pred.push(item.predicted.0);
            }
        }
        if let (Some(c), false) = (&p.clusters, scene.mentions.is_empty()) {
            let pair = GoldPredPair::new(&gold_clusters(scene, &reserved), c)?;
            counts.add(&CorefCounts::of(&pair));
        }
    }
    let cls = micro_macro_f1(&gold, &pred, corpus.registry.len())?;
    let coref = match task {
        Task::Guessing => None,
        _ => counts.scores().ok(),
    };
    Ok(EvalReport {
        task,
        items: gold.len(),
        micro: cls.micro,
        macro_avg: cls.macro_avg,
        coref,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub dev: EvalReport,
    pub selection: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: (u8, usize),
    pub best_dev: EvalReport,
    pub last: Model,
    pub history: Vec<EpochRecord>,
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Runs both stages, evaluating on dev after every epoch. The best-dev model
/// is written to `checkpoint` (if given) whenever it improves.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    checkpoint: Option<&Path>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if (cfg.task == Task::Guessing) != corpus.is_guessing() {
        return Err(TrainError::InvalidConfig(format!(
            "task {} does not match the corpus speaker format",
            cfg.task
        )));
    }
    let has_items = |s: &Sample| match cfg.task {
        Task::Guessing => !s.scene.anonymous_slots().is_empty(),
        _ => !s.scene.mentions.is_empty(),
    };
    let train_set: Vec<Sample> = samples(corpus, Split::Train).into_iter().filter(has_items).collect();
    if train_set.is_empty() {
        return Err(TrainError::MissingSplit("train".into()));
    }
    if corpus.split(Split::Dev).next().is_none() {
        return Err(TrainError::MissingSplit("dev".into()));
    }

    let mut model = Model::new(cfg.task, &cfg.model, corpus, &mut stream(cfg.seed, INIT_STREAM));
    let mut adam = Adam::new(cfg.optimizer, &model.store);
    let mut shuffle = stream(cfg.seed, SHUFFLE_STREAM);
    let mut pairs = stream(cfg.seed, PAIR_STREAM);

    let mut history = Vec::new();
    let mut best: Option<(Model, (u8, usize), EvalReport)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for (stage, sc) in [(1u8, cfg.stage1), (2u8, cfg.stage2)] {
        for epoch in 1..=sc.epochs {
            order.shuffle(&mut shuffle);
            let mut totals = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(sc.batch_size) {
                let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
                let losses = if stage == 1 {
                    stage_one_step(&mut model, &mut adam, &batch, &cfg.ratios, &cfg.contrastive, sc.learning_rate, &mut pairs)?
                } else {
                    stage_two_step(&mut model, &mut adam, &batch, sc.learning_rate)?
                };
                step += 1;
                steps += 1;
                totals += losses.total;
                log(&LogRecord::Step(StepRecord {
                    stage,
                    epoch,
                    step,
                    lr: sc.learning_rate,
                    losses,
                }));
            }
            let dev = evaluate(&model, corpus, Split::Dev)?;
            let selection = dev.selection_score();
            let improved = best.as_ref().is_none_or(|(_, _, b)| selection > b.selection_score());
            if improved {
                if let Some(path) = checkpoint {
                    let mut ck = Checkpoint::new(model.clone(), Some(adam.clone()), Some(cfg.clone()));
                    ck.epoch = Some((stage, epoch));
                    ck.save(path)?;
                }
                best = Some((model.clone(), (stage, epoch), dev));
            }
            let record = EpochRecord {
                stage,
                epoch,
                steps,
                mean_total: totals / steps as f64,
                dev,
                selection,
                best: improved,
            };
            log(&LogRecord::Epoch(record.clone()));
            history.push(record);
        }
    }
    let (best, best_epoch, best_dev) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev,
        last: model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusFormat, SyntheticSpec};

    fn tiny(format: CorpusFormat, seed: u64) -> Corpus {
        let spec = SyntheticSpec {
            n_characters: 3,
            n_scenes: 12,
            utterances_per_scene: 4,
            tokens_per_utterance: 4,
            format,
            ..SyntheticSpec::default()
        };
        generate_synthetic_corpus(&spec, seed).unwrap()
    }

    fn small_config(task: Task) -> TrainConfig {
        let mut cfg = TrainConfig::preset(task);
        cfg.model.hidden = 8;
        cfg.model.ff = 16;
        cfg.model.mlsa_ff = 16;
        cfg.model.max_length = 64;
        cfg.model.mlsa_blocks = 1;
        for s in [&mut cfg.stage1, &mut cfg.stage2] {
            s.learning_rate = 1e-2;
            s.batch_size = 3;
            s.epochs = 2;
        }
        cfg
    }

    fn model_for(task: Task, corpus: &Corpus) -> Model {
        Model::new(task, &small_config(task).model, corpus, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn total_is_the_weighted_sum_of_terms() {
        let corpus = tiny(CorpusFormat::Guessing, 3);
        let model = model_for(Task::Guessing, &corpus);
        let train = samples(&corpus, Split::Train);
        let batch = &train[..4];
        for ratios in [TaskRatios::default(), TaskRatios::new(1.0, 1.0, 1.0), TaskRatios::new(0.3, 0.0, 2.0)] {
            let mut g = Graph::new(&model.store);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let (_, l) = batch_objective(&mut g, &model, batch, Some(&ratios), &ContrastiveConfig::default(), &mut rng).unwrap();
            let expect = ratios.lambda * l.l_sup.unwrap_or(0.0)
                + ratios.alpha * l.l_sum.unwrap_or(0.0)
                + ratios.beta * l.l_cross.unwrap_or(0.0);
            assert!((l.total - expect).abs() < 1e-12, "{l:?}");
            assert_eq!(l.l_sum.is_some(), ratios.alpha > 0.0);
            assert_eq!(l.l_cross.is_some(), ratios.beta > 0.0);
        }
        let mut g = Graph::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, l) = batch_objective(&mut g, &model, batch, Some(&TaskRatios::SUPERVISED_ONLY), &ContrastiveConfig::default(), &mut rng).unwrap();
        assert_eq!(Some(l.total), l.l_sup);
    }

    #[test]
    fn step_errors() {
        let corpus = tiny(CorpusFormat::Guessing, 3);
        let mut model = model_for(Task::Guessing, &corpus);
        let mut adam = Adam::new(AdamConfig::default(), &model.store);
        assert_eq!(stage_two_step(&mut model, &mut adam, &[], 0.1), Err(TrainError::EmptyBatch));
        let train = samples(&corpus, Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = TaskRatios::new(0.0, 0.0, 0.0);
        assert_eq!(
            stage_one_step(&mut model, &mut adam, &train[..2], &zero, &ContrastiveConfig::default(), 0.1, &mut rng),
            Err(TrainError::NoActiveLoss)
        );
    }

    #[test]
    fn stage_two_matches_supervised_stage_one() {
        let corpus = tiny(CorpusFormat::Guessing, 4);
        let model = model_for(Task::Guessing, &corpus);
        let adam = Adam::new(AdamConfig::default(), &model.store);
        let train = samples(&corpus, Split::Train);
        let (mut m1, mut a1) = (model.clone(), adam.clone());
        let (mut m2, mut a2) = (model, adam);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for batch in train.chunks(3) {
            let l1 = stage_one_step(&mut m1, &mut a1, batch, &TaskRatios::SUPERVISED_ONLY, &ContrastiveConfig::default(), 0.01, &mut rng).unwrap();
            let l2 = stage_two_step(&mut m2, &mut a2, batch, 0.01).unwrap();
            assert_eq!(l1, l2);
            assert!(l2.l_sum.is_none() && l2.l_cross.is_none());
        }
        assert_eq!(m1.store, m2.store);
    }

    #[test]
    fn clusters_group_by_prediction() {
        let preds: BTreeMap<usize, CharacterId> =
            [(0, CharacterId(2)), (1, CharacterId(2)), (2, CharacterId(1)), (3, CharacterId(9)), (4, CharacterId(9))].into();
        let c = clusters_from_linking(&preds, &[0, 1, 2, 3, 4], &[CharacterId(9)]).unwrap();
        assert_eq!(c, Clustering(vec![vec![2], vec![0, 1], vec![3], vec![4]]));
        assert_eq!(clusters_from_linking(&preds, &[7], &[]), Err(TrainError::MissingPrediction(7)));
        let distinct: BTreeMap<usize, CharacterId> = (0..3).map(|i| (i, CharacterId(i))).collect();
        assert_eq!(clusters_from_linking(&distinct, &[0, 1, 2], &[]).unwrap().0.len(), 3);
    }

    #[test]
    fn train_is_deterministic_and_logs_stages() {
        let corpus = tiny(CorpusFormat::Guessing, 8);
        let cfg = small_config(Task::Guessing);
        let run = || {
            let mut records = Vec::new();
            let out = train(&cfg, &corpus, None, &mut |r| records.push(serde_json::to_string(r).unwrap())).unwrap();
            (out, records)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a.best.store, b.best.store);
        assert_eq!(a.history.len(), 4);
        for line in &ra {
            if line.contains("\"stage\":2") && line.contains("\"record\":\"step\"") {
                assert!(!line.contains("l_sum") && !line.contains("l_cross"), "{line}");
            }
        }
        assert!(ra.iter().any(|l| l.contains("\"stage\":1") && l.contains("l_cross")));
    }

    #[test]
    fn linking_predictions_and_checkpoint_round_trip() {
        let corpus = tiny(CorpusFormat::LinkingCoref, 2);
        let cfg = small_config(Task::Linking);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.json");
        let out = train(&cfg, &corpus, Some(&path), &mut |_| {}).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.model.store, out.best.store);
        ck.model.check_registry(&corpus.registry).unwrap();
        for scene in corpus.split(Split::Test) {
            let p = predict(&ck.model, scene).unwrap();
            assert_eq!(p, predict(&out.best, scene).unwrap());
            assert_eq!(p.items.len(), scene.mentions.len());
            let c = p.clusters.unwrap();
            assert_eq!(c.mentions(), scene.mentions.len());
        }
        let report = evaluate(&ck.model, &corpus, Split::Dev).unwrap();
        assert_eq!(report, out.best_dev);
    }

    #[test]
    fn perfect_linking_scores_one() {
        let corpus = tiny(CorpusFormat::LinkingCoref, 6);
        let reserved = reserved_ids(corpus.registry.names());
        let preds: Vec<(&Scene, ScenePrediction)> = corpus
            .scenes
            .iter()
            .map(|s| {
                let items = s
                    .mentions
                    .iter()
                    .map(|m| PredictedItem { key: m.mention_id, gold: Some(m.gold), predicted: m.gold })
                    .collect();
                (s, ScenePrediction { scene_id: s.scene_id.clone(), items, clusters: Some(gold_clusters(s, &reserved)) })
            })
            .collect();
        let r = score_predictions(Task::Coref, &corpus, &preds).unwrap();
        let c = r.coref.unwrap();
        assert_eq!((c.b3.f1, c.ceaf_phi4.f1, c.blanc.f1, r.micro.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn incompatible_registry() {
        let corpus = tiny(CorpusFormat::Guessing, 1);
        let model = model_for(Task::Guessing, &corpus);
        let other = crate::data::CharacterRegistry::new(["A", "B"]).unwrap();
        assert!(matches!(model.check_registry(&other), Err(TrainError::IncompatibleCheckpoint(_))));
    }
}
