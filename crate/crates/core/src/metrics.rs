//! Coreference (B³, CEAFφ4, BLANC) and classification (micro/macro F1)
//! metrics, plus slow exact-arithmetic oracles for small instances.
//!
//! Per-scene results are kept as raw counts ([`CorefCounts`]) so that a
//! split is scored by summing counts over scenes, not by averaging scores.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum MetricError {
    #[error("mention universes differ: {only_gold} mention(s) only in gold, {only_pred} only in prediction")]
    MentionUniverseMismatch { only_gold: usize, only_pred: usize },
    #[error("mention {0} appears more than once")]
    DuplicateMention(usize),
    #[error("BLANC needs at least two mentions")]
    TooFewMentions,
    #[error("gold has {gold} labels, prediction has {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("oracle limited to {max} mentions, got {actual}")]
    TooLarge { actual: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    pub const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// A partition of mention ids into clusters.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Clustering(pub Vec<Vec<usize>>);

impl Clustering {
    /// Mention `i` goes to the cluster named by `labels[i]`.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (m, &l) in labels.iter().enumerate() {
            by.entry(l).or_default().push(m);
        }
        Self(by.into_values().collect())
    }

    pub fn mentions(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }

    fn assignment(&self) -> Result<BTreeMap<usize, usize>, MetricError> {
        let mut out = BTreeMap::new();
        for (c, cluster) in self.0.iter().enumerate() {
            for &m in cluster {
                if out.insert(m, c).is_some() {
                    return Err(MetricError::DuplicateMention(m));
                }
            }
        }
        Ok(out)
    }
}

/// Gold and predicted clusterings over the same mentions, as dense cluster
/// labels indexed by mention position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldPredPair {
    pub gold: Vec<usize>,
    pub pred: Vec<usize>,
    pub gold_clusters: usize,
    pub pred_clusters: usize,
}

impl GoldPredPair {
    pub fn new(gold: &Clustering, pred: &Clustering) -> Result<Self, MetricError> {
        let g = gold.assignment()?;
        let p = pred.assignment()?;
        let only_gold = g.keys().filter(|m| !p.contains_key(m)).count();
        let only_pred = p.keys().filter(|m| !g.contains_key(m)).count();
        if only_gold + only_pred > 0 {
            return Err(MetricError::MentionUniverseMismatch { only_gold, only_pred });
        }
        Ok(Self {
            gold: g.values().copied().collect(),
            pred: g.keys().map(|m| p[m]).collect(),
            gold_clusters: gold.0.iter().filter(|c| !c.is_empty()).count(),
            pred_clusters: pred.0.iter().filter(|c| !c.is_empty()).count(),
        })
    }

    pub fn from_labels(gold: &[usize], pred: &[usize]) -> Result<Self, MetricError> {
        if gold.len() != pred.len() {
            return Err(MetricError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        Self::new(&Clustering::from_labels(gold), &Clustering::from_labels(pred))
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Coreference and non-coreference link tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LinkCounts {
    /// Coreferent in both gold and prediction.
    pub right_coref: u64,
    /// Predicted coreferent, gold non-coreferent.
    pub wrong_coref: u64,
    /// Predicted non-coreferent, gold coreferent.
    pub wrong_noncoref: u64,
    pub right_noncoref: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorefCounts {
    pub mentions: u64,
    pub b3_precision_sum: f64,
    pub b3_recall_sum: f64,
    pub ceaf_similarity: f64,
    pub gold_clusters: u64,
    pub pred_clusters: u64,
    pub links: LinkCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorefScores {
    pub b3: Prf,
    pub ceaf_phi4: Prf,
    pub blanc: Prf,
    /// Mean of the three F1 values.
    pub conll_avg: f64,
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

impl CorefCounts {
    pub fn of(pair: &GoldPredPair) -> Self {
        let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut gsize: BTreeMap<usize, u64> = BTreeMap::new();
        let mut psize: BTreeMap<usize, u64> = BTreeMap::new();
        for (&g, &p) in pair.gold.iter().zip(&pair.pred) {
            *joint.entry((g, p)).or_default() += 1;
            *gsize.entry(g).or_default() += 1;
            *psize.entry(p).or_default() += 1;
        }
        let mut b3_precision_sum = 0.0;
        let mut b3_recall_sum = 0.0;
        for (&(g, p), &n) in &joint {
            let n = n as f64;
            b3_precision_sum += n * n / psize[&p] as f64;
            b3_recall_sum += n * n / gsize[&g] as f64;
        }

        let gold_ids: Vec<usize> = gsize.keys().copied().collect();
        let pred_ids: Vec<usize> = psize.keys().copied().collect();
        let sim: Vec<Vec<f64>> = gold_ids
            .iter()
            .map(|g| {
                pred_ids
                    .iter()
                    .map(|p| {
                        let both = joint.get(&(*g, *p)).copied().unwrap_or(0) as f64;
                        2.0 * both / (gsize[g] + psize[p]) as f64
                    })
                    .collect()
            })
            .collect();
        let ceaf_similarity = max_assignment(&sim);

        let n = pair.len() as u64;
        let right_coref: u64 = joint.values().map(|&c| choose2(c)).sum();
        let gold_coref: u64 = gsize.values().map(|&c| choose2(c)).sum();
        let pred_coref: u64 = psize.values().map(|&c| choose2(c)).sum();
        let links = LinkCounts {
            right_coref,
            wrong_coref: pred_coref - right_coref,
            wrong_noncoref: gold_coref - right_coref,
            right_noncoref: choose2(n) + right_coref - gold_coref - pred_coref,
        };
        Self {
            mentions: n,
            b3_precision_sum,
            b3_recall_sum,
            ceaf_similarity,
            gold_clusters: gold_ids.len() as u64,
            pred_clusters: pred_ids.len() as u64,
            links,
        }
    }

    pub fn add(&mut self, other: &CorefCounts) {
        self.mentions += other.mentions;
        self.b3_precision_sum += other.b3_precision_sum;
        self.b3_recall_sum += other.b3_recall_sum;
        self.ceaf_similarity += other.ceaf_similarity;
        self.gold_clusters += other.gold_clusters;
        self.pred_clusters += other.pred_clusters;
        self.links.right_coref += other.links.right_coref;
        self.links.wrong_coref += other.links.wrong_coref;
        self.links.wrong_noncoref += other.links.wrong_noncoref;
        self.links.right_noncoref += other.links.right_noncoref;
    }

    pub fn b_cubed(&self) -> Prf {
        let n = self.mentions as f64;
        Prf::new(ratio(self.b3_precision_sum, n), ratio(self.b3_recall_sum, n))
    }

    pub fn ceaf_phi4(&self) -> Prf {
        Prf::new(
            ratio(self.ceaf_similarity, self.pred_clusters as f64),
            ratio(self.ceaf_similarity, self.gold_clusters as f64),
        )
    }

    pub fn blanc(&self) -> Result<Prf, MetricError> {
        let l = &self.links;
        let total = l.right_coref + l.wrong_coref + l.wrong_noncoref + l.right_noncoref;
        if total == 0 {
            return Err(MetricError::TooFewMentions);
        }
        let side = |right: u64, wrong_pred: u64, wrong_gold: u64| -> Option<Prf> {
            let predicted = right + wrong_pred;
            let gold = right + wrong_gold;
            if predicted == 0 && gold == 0 {
                return None;
            }
            Some(Prf::new(
                ratio(right as f64, predicted as f64),
                ratio(right as f64, gold as f64),
            ))
        };
        let coref = side(l.right_coref, l.wrong_coref, l.wrong_noncoref);
        let non = side(l.right_noncoref, l.wrong_noncoref, l.wrong_coref);
        let (c, n) = match (coref, non) {
            (Some(c), Some(n)) => (c, n),
            (Some(c), None) => (c, c),
            (None, Some(n)) => (n, n),
            (None, None) => unreachable!("at least one link exists"),
        };
        Ok(Prf {
            precision: (c.precision + n.precision) / 2.0,
            recall: (c.recall + n.recall) / 2.0,
            f1: (c.f1 + n.f1) / 2.0,
        })
    }

    pub fn scores(&self) -> Result<CorefScores, MetricError> {
        let b3 = self.b_cubed();
        let ceaf_phi4 = self.ceaf_phi4();
        let blanc = self.blanc()?;
        Ok(CorefScores {
            b3,
            ceaf_phi4,
            blanc,
            conll_avg: (b3.f1 + ceaf_phi4.f1 + blanc.f1) / 3.0,
        })
    }
}

pub fn b_cubed(pair: &GoldPredPair) -> Prf {
    CorefCounts::of(pair).b_cubed()
}

pub fn ceaf_phi4(pair: &GoldPredPair) -> Prf {
    CorefCounts::of(pair).ceaf_phi4()
}

pub fn blanc(pair: &GoldPredPair) -> Result<Prf, MetricError> {
    if pair.len() < 2 {
        return Err(MetricError::TooFewMentions);
    }
    CorefCounts::of(pair).blanc()
}

/// Maximum-weight one-to-one matching between rows and columns of a
/// nonnegative weight matrix (Hungarian method with potentials).
pub fn max_assignment(weights: &[Vec<f64>]) -> f64 {
    let rows = weights.len();
    if rows == 0 {
        return 0.0;
    }
    let cols = weights[0].len();
    if cols == 0 {
        return 0.0;
    }
    // The algorithm wants rows <= cols.
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| weights[r][c]).collect()).collect();
        return max_assignment(&t);
    }
    let cost = |r: usize, c: usize| -weights[r - 1][c - 1];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| weights[owner[j] - 1][j - 1])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub micro: Prf,
    pub macro_avg: Prf,
    pub support: usize,
}

/// Micro scores pool TP/FP/FN over classes; macro averages per-class scores
/// over the classes that occur in gold.
pub fn micro_macro_f1(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<ClassificationScores, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if let Some(&label) = gold.iter().chain(pred).find(|&&l| l >= n_classes) {
        return Err(MetricError::LabelOutOfRange {
            label,
            classes: n_classes,
        });
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fne = vec![0u64; n_classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fne[g] += 1;
        }
    }
    let (t, f_p, f_n) = (tp.iter().sum::<u64>() as f64, fp.iter().sum::<u64>() as f64, fne.iter().sum::<u64>() as f64);
    let micro = Prf::new(ratio(t, t + f_p), ratio(t, t + f_n));
    let present: Vec<usize> = (0..n_classes).filter(|&c| tp[c] + fne[c] > 0).collect();
    let macro_avg = if present.is_empty() {
        Prf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        }
    } else {
        let k = present.len() as f64;
        let per: Vec<Prf> = present
            .iter()
            .map(|&c| {
                Prf::new(
                    ratio(tp[c] as f64, (tp[c] + fp[c]) as f64),
                    ratio(tp[c] as f64, (tp[c] + fne[c]) as f64),
                )
            })
            .collect();
        Prf {
            precision: per.iter().map(|p| p.precision).sum::<f64>() / k,
            recall: per.iter().map(|p| p.recall).sum::<f64>() / k,
            f1: per.iter().map(|p| p.f1).sum::<f64>() / k,
        }
    };
    Ok(ClassificationScores {
        micro,
        macro_avg,
        support: gold.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorefMetric {
    BCubed,
    CeafPhi4,
    Blanc,
}

pub const ORACLE_MAX_MENTIONS: usize = 8;

type Q = Ratio<i64>;

fn q(n: usize) -> Q {
    Q::from_integer(n as i64)
}

fn qf(x: Q) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

fn q_prf(p: Q, r: Q) -> Prf {
    let f = if p + r == q(0) { q(0) } else { q(2) * p * r / (p + r) };
    Prf {
        precision: qf(p),
        recall: qf(r),
        f1: qf(f),
    }
}

fn q_div(a: Q, b: Q) -> Q {
    if b == q(0) {
        q(0)
    } else {
        a / b
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Direct evaluation of a coreference metric from its definition, using
/// exact rational arithmetic: per-mention overlaps for B³, every pair of
/// mentions for BLANC, every one-to-one cluster matching for CEAFφ4.
pub fn brute_force_oracle(pair: &GoldPredPair, metric: CorefMetric) -> Result<Prf, MetricError> {
    let n = pair.len();
    if n > ORACLE_MAX_MENTIONS {
        return Err(MetricError::TooLarge {
            actual: n,
            max: ORACLE_MAX_MENTIONS,
        });
    }
    let (g, p) = (&pair.gold, &pair.pred);
    match metric {
        CorefMetric::BCubed => {
            let mut ps = q(0);
            let mut rs = q(0);
            for m in 0..n {
                let same_pred = (0..n).filter(|&k| p[k] == p[m]).count();
                let same_gold = (0..n).filter(|&k| g[k] == g[m]).count();
                let both = (0..n).filter(|&k| p[k] == p[m] && g[k] == g[m]).count();
                ps += Q::new(both as i64, same_pred as i64);
                rs += Q::new(both as i64, same_gold as i64);
            }
            Ok(q_prf(q_div(ps, q(n)), q_div(rs, q(n))))
        }
        CorefMetric::CeafPhi4 => {
            let gold: Vec<BTreeSet<usize>> = groups(g);
            let pred: Vec<BTreeSet<usize>> = groups(p);
            let phi = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| Q::new(2 * a.intersection(b).count() as i64, (a.len() + b.len()) as i64);
            let (small, large, swapped) = if gold.len() <= pred.len() {
                (&gold, &pred, false)
            } else {
                (&pred, &gold, true)
            };
            let idx: Vec<usize> = (0..large.len()).collect();
            let mut best = q(0);
            for perm in permutations(&idx) {
                let total = small
                    .iter()
                    .zip(&perm)
                    .map(|(s, &l)| if swapped { phi(&large[l], s) } else { phi(s, &large[l]) })
                    .fold(q(0), |a, b| a + b);
                if total > best {
                    best = total;
                }
            }
            Ok(q_prf(q_div(best, q(pred.len())), q_div(best, q(gold.len()))))
        }
        CorefMetric::Blanc => {
            if n < 2 {
                return Err(MetricError::TooFewMentions);
            }
            let (mut rc, mut wc, mut wn, mut rn) = (0, 0, 0, 0);
            for a in 0..n {
                for b in a + 1..n {
                    match (g[a] == g[b], p[a] == p[b]) {
                        (true, true) => rc += 1,
                        (false, true) => wc += 1,
                        (true, false) => wn += 1,
                        (false, false) => rn += 1,
                    }
                }
            }
            let side = |right: usize, pred_links: usize, gold_links: usize| -> Option<(Q, Q, Q)> {
                if pred_links == 0 && gold_links == 0 {
                    return None;
                }
                let pr = q_div(q(right), q(pred_links));
                let re = q_div(q(right), q(gold_links));
                let f = if pr + re == q(0) { q(0) } else { q(2) * pr * re / (pr + re) };
                Some((pr, re, f))
            };
            let c = side(rc, rc + wc, rc + wn);
            let nn = side(rn, rn + wn, rn + wc);
            let (c, nn) = match (c, nn) {
                (Some(c), Some(x)) => (c, x),
                (Some(c), None) => (c, c),
                (None, Some(x)) => (x, x),
                (None, None) => unreachable!(),
            };
            let half = Q::new(1, 2);
            Ok(Prf {
                precision: qf((c.0 + nn.0) * half),
                recall: qf((c.1 + nn.1) * half),
                f1: qf((c.2 + nn.2) * half),
            })
        }
    }
}

fn groups(labels: &[usize]) -> Vec<BTreeSet<usize>> {
    let mut by: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (m, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().insert(m);
    }
    by.into_values().collect()
}

/// Exact micro/macro scores from a full confusion matrix.
pub fn classification_oracle(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<ClassificationScores, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= n_classes || p >= n_classes {
            return Err(MetricError::LabelOutOfRange {
                label: g.max(p),
                classes: n_classes,
            });
        }
        confusion[g][p] += 1;
    }
    let row = |c: usize| confusion[c].iter().sum::<usize>();
    let col = |c: usize| confusion.iter().map(|r| r[c]).sum::<usize>();
    let diag: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let total = gold.len();
    let micro = q_prf(q_div(q(diag), q(total)), q_div(q(diag), q(total)));
    let present: Vec<usize> = (0..n_classes).filter(|&c| row(c) > 0).collect();
    let (mut sp, mut sr, mut sf) = (q(0), q(0), q(0));
    for &c in &present {
        let pr = q_div(q(confusion[c][c]), q(col(c)));
        let re = q_div(q(confusion[c][c]), q(row(c)));
        sp += pr;
        sr += re;
        sf += if pr + re == q(0) { q(0) } else { q(2) * pr * re / (pr + re) };
    }
    let k = q(present.len());
    Ok(ClassificationScores {
        micro,
        macro_avg: Prf {
            precision: qf(q_div(sp, k)),
            recall: qf(q_div(sr, k)),
            f1: qf(q_div(sf, k)),
        },
        support: total,
    })
}

/// Every set partition of `n` mentions as restricted-growth label strings.
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn go(i: usize, n: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for l in 0..=max.min(i) {
            cur.push(l);
            go(i + 1, n, if l == max { max + 1 } else { max }, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, 0, &mut Vec::with_capacity(n), &mut out);
    out
}
