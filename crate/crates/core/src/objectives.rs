//! Supervised and contrastive losses, and positive-pair sampling.
//!
//! Each loss has an eager `f64` form over plain vectors and a graph form used
//! in training. The eager forms are written independently of the graph ops.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, NodeId, ParamStore};
use crate::data::CharacterId;
use crate::encoding::{EmbeddingMeta, Linear};
use crate::tensor::{dot, norm, Matrix};

#[derive(Debug, Error, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum ObjectiveError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("expected width {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("pair set is empty")]
    EmptyPairSet,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("temperature must be finite and positive, got {0}")]
    BadTemperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.temperature.is_finite() && self.temperature > 0.0 {
            Ok(())
        } else {
            Err(ObjectiveError::BadTemperature(self.temperature))
        }
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, ObjectiveError> {
    if u.len() != v.len() || u.is_empty() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(ObjectiveError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// An (anchor, positive) pair given as row indices into the anchor and
/// positive pools it was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub character: CharacterId,
    pub anchor: usize,
    pub positive: usize,
}

/// Pairs sorted by character; each character appears at most once.
pub type PairSet = Vec<Pair>;

fn rows_by_character(meta: &[EmbeddingMeta]) -> BTreeMap<CharacterId, Vec<usize>> {
    let mut out: BTreeMap<CharacterId, Vec<usize>> = BTreeMap::new();
    for (i, m) in meta.iter().enumerate() {
        if let Some(c) = m.character {
            out.entry(c).or_default().push(i);
        }
    }
    out
}

/// For each shared character, one conversation row and one summary row,
/// each drawn uniformly among that character's rows.
pub fn sample_summary_conversation_pairs<R: Rng>(
    shared: &[CharacterId],
    conversation: &[EmbeddingMeta],
    summary: &[EmbeddingMeta],
    rng: &mut R,
) -> PairSet {
    let conv = rows_by_character(conversation);
    let summ = rows_by_character(summary);
    let mut shared = shared.to_vec();
    shared.sort();
    shared.dedup();
    shared
        .into_iter()
        .filter_map(|c| {
            let a = conv.get(&c)?.choose(rng)?;
            let p = summ.get(&c)?.choose(rng)?;
            Some(Pair {
                character: c,
                anchor: *a,
                positive: *p,
            })
        })
        .collect()
}

/// For every character with rows in at least two samples, one ordered pair
/// of rows with different sample indices, uniform over all such pairs.
/// Indices refer to `items` for both anchor and positive.
pub fn sample_cross_pairs<R: Rng>(items: &[EmbeddingMeta], excluded: &[CharacterId], rng: &mut R) -> PairSet {
    let mut out = Vec::new();
    for (c, rows) in rows_by_character(items) {
        if excluded.contains(&c) {
            continue;
        }
        let samples: BTreeSet<usize> = rows.iter().map(|&r| items[r].sample_index).collect();
        if samples.len() < 2 {
            continue;
        }
        let valid: Vec<(usize, usize)> = rows
            .iter()
            .flat_map(|&a| rows.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| items[a].sample_index != items[b].sample_index)
            .collect();
        let &(anchor, positive) = valid.choose(rng).expect("two samples give a valid pair");
        out.push(Pair {
            character: c,
            anchor,
            positive,
        });
    }
    out
}

/// `sum_i -log softmax_j(sim(a_i, p_j) / tau)[i]` over plain vectors.
fn info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], cfg: &ContrastiveConfig) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(ObjectiveError::EmptyPairSet);
    }
    assert_eq!(anchors.len(), positives.len(), "one positive per anchor");
    let mut total = 0.0;
    for (i, a) in anchors.iter().enumerate() {
        let logits = positives
            .iter()
            .map(|p| cosine_similarity(a, p).map(|s| s / cfg.temperature))
            .collect::<Result<Vec<f64>, _>>()?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total)
}

/// Conversation-side anchors against summary-side positives of one sample.
pub fn summary_conversation_loss(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    cfg: &ContrastiveConfig,
) -> Result<f64, ObjectiveError> {
    info_nce(anchors, positives, cfg)
}

/// Pairs drawn from different samples of a batch.
pub fn cross_sample_loss(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    cfg: &ContrastiveConfig,
) -> Result<f64, ObjectiveError> {
    info_nce(anchors, positives, cfg)
}

/// Graph form of the contrastive loss over `n x d` anchor and positive nodes
/// whose rows are paired by index.
pub fn info_nce_graph(
    g: &mut Graph,
    anchors: NodeId,
    positives: NodeId,
    cfg: &ContrastiveConfig,
) -> Result<NodeId, ObjectiveError> {
    cfg.validate()?;
    let (n, d) = g.shape(anchors);
    let (m, d2) = g.shape(positives);
    if n == 0 {
        return Err(ObjectiveError::EmptyPairSet);
    }
    if d != d2 || n != m {
        return Err(ObjectiveError::DimensionMismatch { expected: d, actual: d2 });
    }
    for id in [anchors, positives] {
        let v = g.value(id);
        if (0..v.rows).any(|r| norm(v.row(r)) == 0.0) {
            return Err(ObjectiveError::ZeroVector);
        }
    }
    let a = g.normalize_rows(anchors);
    let p = g.normalize_rows(positives);
    let sim = g.matmul_t(a, p);
    let logits = g.scale(sim, 1.0 / cfg.temperature);
    let logp = g.log_softmax_rows(logits);
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let picked = g.gather_elems(logp, &diag);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub hidden: Vec<Linear>,
    pub output: Linear,
    pub classes: usize,
    pub dim: usize,
}

impl ClassifierHead {
    /// `depth` hidden layers of width `dim` with GELU, then a linear map to
    /// `classes` logits.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        classes: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (0..depth)
            .map(|i| Linear::new(store, &format!("{name}.hidden{i}"), dim, dim, true, rng))
            .collect();
        let output = Linear::new(store, &format!("{name}.output"), dim, classes, true, rng);
        Self {
            hidden,
            output,
            classes,
            dim,
        }
    }

    pub fn logits(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = x;
        for layer in &self.hidden {
            let y = layer.forward(g, h);
            h = g.gelu(y);
        }
        self.output.forward(g, h)
    }
}

/// Class probabilities for one embedding.
pub fn classify(store: &ParamStore, head: &ClassifierHead, e: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
    if e.len() != head.dim {
        return Err(ObjectiveError::DimensionMismatch {
            expected: head.dim,
            actual: e.len(),
        });
    }
    let mut g = Graph::new(store);
    let x = g.input(Matrix::row_vector(e));
    let logits = head.logits(&mut g, x);
    let p = g.softmax_rows(logits);
    Ok(g.value(p).data.clone())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), ObjectiveError> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(ObjectiveError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean negative log-probability of the gold label.
pub fn supervised_loss(preds: &[Vec<f64>], labels: &[usize]) -> Result<f64, ObjectiveError> {
    assert_eq!(preds.len(), labels.len(), "one label per prediction");
    let classes = preds.first().map_or(0, Vec::len);
    check_labels(labels, classes)?;
    let total: f64 = preds.iter().zip(labels).map(|(p, &l)| -p[l].ln()).sum();
    Ok(total / labels.len() as f64)
}

/// Graph form over an `n x classes` logits node.
pub fn supervised_loss_graph(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId, ObjectiveError> {
    let (n, classes) = g.shape(logits);
    check_labels(labels, classes)?;
    assert_eq!(n, labels.len(), "one label per row");
    let logp = g.log_softmax_rows(logits);
    let at: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = g.gather_elems(logp, &at);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EmbeddingSource;
    use crate::gradcheck::{assert_close, central_difference};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn meta(character: usize, sample_index: usize) -> EmbeddingMeta {
        EmbeddingMeta {
            character: Some(CharacterId(character)),
            sample_index,
            source: EmbeddingSource::Conversation,
            key: 0,
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, -2.0], &[3.0, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(ObjectiveError::ZeroVector));
    }

    #[test]
    fn closed_forms() {
        let cfg = ContrastiveConfig::default();
        let one = summary_conversation_loss(&[vec![1.0, 2.0]], &[vec![-3.0, 0.5]], &cfg).unwrap();
        assert_eq!(one, 0.0);
        let same = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let two = cross_sample_loss(&same, &same, &cfg).unwrap();
        assert!((two - 2.0 * LN2).abs() < 1e-12);
        assert_eq!(cross_sample_loss(&[], &[], &cfg), Err(ObjectiveError::EmptyPairSet));
    }

    #[test]
    fn near_perfect_alignment_at_low_temperature() {
        let basis = |i: usize| (0..3).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let anchors: Vec<_> = (0..3).map(|i| basis(i).iter().map(|x| x + 1e-3).collect()).collect();
        let positives: Vec<_> = (0..3).map(basis).collect();
        let l = summary_conversation_loss(&anchors, &positives, &ContrastiveConfig::default()).unwrap();
        // each term is about ln(1 + 2 e^-10)
        assert!(l < 1e-3);
        assert!((l - 3.0 * (2.0 * (-10.0f64).exp()).ln_1p()).abs() < 1e-5);
    }

    #[test]
    fn block_diagonal_example() {
        let basis = |i: usize| (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let v: Vec<_> = (0..4).map(basis).collect();
        let l = cross_sample_loss(&v, &v, &ContrastiveConfig { temperature: 1.0 }).unwrap();
        let e = std::f64::consts::E;
        assert!((l - 4.0 * -(e / (e + 3.0)).ln()).abs() < 1e-12);
        // 4 ln(1 + 3/e), about 2.97467
        assert!((l - 4.0 * (3.0 / e).ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn supervised_examples() {
        assert_eq!(supervised_loss(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        let u = supervised_loss(&[vec![0.25; 4]], &[2]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        let l = supervised_loss(&[vec![0.5, 0.5], vec![0.25, 0.75]], &[0, 0]).unwrap();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((l - 1.03972).abs() < 1e-5);
        assert_eq!(supervised_loss(&[], &[]), Err(ObjectiveError::EmptyBatch));
        assert_eq!(
            supervised_loss(&[vec![1.0]], &[3]),
            Err(ObjectiveError::LabelOutOfRange { label: 3, classes: 1 })
        );
    }

    #[test]
    fn classify_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "head", 3, 5, 1, &mut rng);
        let p = classify(&store, &head, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|&x| x > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(classify(&store, &head, &[1.0]).is_err());

        // zero output weights: uniform regardless of input
        *store.get_mut(head.output.weight) = Matrix::zeros(3, 5);
        let p = classify(&store, &head, &[0.3, -1.0, 2.0]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn summary_pairs_singleton_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = [meta(0, 0), meta(1, 0)];
        let summ = [meta(1, 0), meta(0, 0)];
        let pairs = sample_summary_conversation_pairs(&[CharacterId(1), CharacterId(0)], &conv, &summ, &mut rng);
        assert_eq!(
            pairs,
            vec![
                Pair { character: CharacterId(0), anchor: 0, positive: 1 },
                Pair { character: CharacterId(1), anchor: 1, positive: 0 },
            ]
        );
        assert!(sample_summary_conversation_pairs(&[], &conv, &summ, &mut rng).is_empty());
    }

    #[test]
    fn summary_pairs_uniform_choice() {
        let conv = [meta(0, 0), meta(0, 0), meta(0, 0)];
        let summ = [meta(0, 0)];
        let mut counts = [0usize; 3];
        let trials = 10_000;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_summary_conversation_pairs(&[CharacterId(0)], &conv, &summ, &mut rng);
            counts[p[0].anchor] += 1;
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            sample_summary_conversation_pairs(&[CharacterId(0)], &conv, &summ, &mut a),
            sample_summary_conversation_pairs(&[CharacterId(0)], &conv, &summ, &mut b)
        );
    }

    #[test]
    fn cross_pairs_examples() {
        let items = [meta(0, 0), meta(0, 1), meta(1, 0), meta(1, 0), meta(1, 0)];
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = sample_cross_pairs(&items, &[], &mut rng);
            assert_eq!(pairs.len(), 1);
            let p = pairs[0];
            assert_eq!(p.character, CharacterId(0));
            assert_ne!(items[p.anchor].sample_index, items[p.positive].sample_index);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_cross_pairs(&items, &[CharacterId(0)], &mut rng).is_empty());
    }

    fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn graph_matches_eager_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let store = ParamStore::new();
        let cfg = ContrastiveConfig { temperature: 0.5 };
        for n in 1..=5 {
            let a = random_rows(n, 6, &mut rng);
            let p = random_rows(n, 6, &mut rng);
            let eval = |a: &Matrix, p: &Matrix| info_nce(&a.to_rows(), &p.to_rows(), &cfg).unwrap();

            let mut g = Graph::new(&store);
            let an = g.input(a.clone());
            let pn = g.input(p.clone());
            let loss = info_nce_graph(&mut g, an, pn, &cfg).unwrap();
            assert!((g.scalar(loss) - eval(&a, &p)).abs() < 1e-12);
            let grads = g.backward(loss);
            let na = central_difference(&a, 1e-6, |x| eval(x, &p));
            let np = central_difference(&p, 1e-6, |x| eval(&a, x));
            assert_close(&grads.node(an).unwrap().data, &na.data, 1e-4, 1e-8);
            assert_close(&grads.node(pn).unwrap().data, &np.data, 1e-4, 1e-8);
        }
    }

    #[test]
    fn supervised_graph_matches_eager() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::new();
        let logits = random_rows(4, 5, &mut rng);
        let labels = [0, 4, 2, 2];
        let eager = |x: &Matrix| {
            let probs: Vec<Vec<f64>> = x
                .to_rows()
                .into_iter()
                .map(|r| {
                    let z: f64 = r.iter().map(|v| v.exp()).sum();
                    r.iter().map(|v| v.exp() / z).collect()
                })
                .collect();
            supervised_loss(&probs, &labels).unwrap()
        };
        let mut g = Graph::new(&store);
        let x = g.input(logits.clone());
        let loss = supervised_loss_graph(&mut g, x, &labels).unwrap();
        assert!((g.scalar(loss) - eager(&logits)).abs() < 1e-12);
        let grads = g.backward(loss);
        let numeric = central_difference(&logits, 1e-6, eager);
        assert_close(&grads.node(x).unwrap().data, &numeric.data, 1e-4, 1e-8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rows(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(proptest::collection::vec(0.1f64..2.0, 4), n)
        }

        proptest! {
            #[test]
            fn loss_nonnegative_and_scale_invariant(
                (a, p) in (1usize..6).prop_flat_map(|n| (rows(n), rows(n))),
                k in 0.1f64..10.0,
                tau in 0.05f64..2.0,
            ) {
                let cfg = ContrastiveConfig { temperature: tau };
                let l = cross_sample_loss(&a, &p, &cfg).unwrap();
                prop_assert!(l >= 0.0);
                let scaled: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| x * k).collect()).collect();
                let ls = cross_sample_loss(&scaled, &p, &cfg).unwrap();
                prop_assert!((l - ls).abs() <= 1e-9 * l.max(1.0));
            }

            #[test]
            fn loss_invariant_under_pair_order(
                (a, p) in (2usize..6).prop_flat_map(|n| (rows(n), rows(n))),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                let cfg = ContrastiveConfig::default();
                let mut order: Vec<usize> = (0..a.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
                let pp: Vec<_> = order.iter().map(|&i| p[i].clone()).collect();
                let l = summary_conversation_loss(&a, &p, &cfg).unwrap();
                let lp = summary_conversation_loss(&pa, &pp, &cfg).unwrap();
                prop_assert!((l - lp).abs() <= 1e-9 * l.max(1.0));
            }

            #[test]
            fn softmax_shift_invariance(logits in proptest::collection::vec(-5.0f64..5.0, 2..6), c in -10.0f64..10.0) {
                let store = ParamStore::new();
                let run = |shift: f64| {
                    let mut g = Graph::new(&store);
                    let x = g.input(Matrix::row_vector(&logits.iter().map(|v| v + shift).collect::<Vec<_>>()));
                    let p = g.softmax_rows(x);
                    g.value(p).data.clone()
                };
                let (a, b) = (run(0.0), run(c));
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
