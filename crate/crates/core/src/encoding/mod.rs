//! Scenes and summaries to character embeddings.
//!
//! Everything here records onto a caller-owned [`Graph`] so the same code
//! path serves inference and training. Embeddings for one sample are kept as
//! a single `n x d` node plus per-row metadata ([`EmbeddingBatch`]); use
//! [`EmbeddingBatch::materialize`] to get plain vectors.

mod encoder;
mod layers;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::data::{CharacterId, MentionSpan, Scene, SpeakerSlot, Summary};
use crate::tensor::Matrix;

pub use encoder::{EncoderConfig, EncoderContract, ToyEncoder, Vocab, SEP_TOKEN, UNK_TOKEN};
pub use layers::{LayerNorm, Linear, SelfAttention, TransformerBlock};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum EncodingError {
    #[error("input of {actual} tokens exceeds max length {max}")]
    TooLong { actual: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("mention {0} does not resolve to encoded tokens")]
    UnresolvableSpan(usize),
    #[error("speaker of mention {0} is unknown")]
    UnknownSpeaker(usize),
    #[error("mask for slot {0} selects no tokens")]
    EmptyMask(usize),
    #[error("expected width {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Contextual vectors for a token sequence. `token_map` sends
/// `(utterance, offset)` to a row of `h`; separator rows are not mapped.
#[derive(Debug, Clone)]
pub struct SequenceEncoding {
    pub h: NodeId,
    pub rows: usize,
    pub token_map: BTreeMap<(usize, usize), usize>,
}

impl SequenceEncoding {
    pub fn row(&self, utterance: usize, offset: usize) -> Option<usize> {
        self.token_map.get(&(utterance, offset)).copied()
    }

    /// Wraps an existing `rows x d` node whose rows are utterances laid out
    /// back to back, each followed by one separator row except the last.
    pub fn from_layout(h: NodeId, utterance_lengths: &[usize]) -> Self {
        let mut token_map = BTreeMap::new();
        let mut row = 0;
        for (u, &len) in utterance_lengths.iter().enumerate() {
            if u > 0 {
                row += 1;
            }
            for off in 0..len {
                token_map.insert((u, off), row);
                row += 1;
            }
        }
        Self {
            h,
            rows: row,
            token_map,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Conversation,
    Summary,
}

impl EmbeddingSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conversation => "conversation",
            Self::Summary => "summary",
        }
    }
}

/// Metadata for one embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    /// Gold label when known (unlabeled test slots have none).
    pub character: Option<CharacterId>,
    pub sample_index: usize,
    pub source: EmbeddingSource,
    /// Mention id, or anonymous slot number for pooled speaker embeddings.
    pub key: usize,
}

/// A sample's embeddings as one `n x d` graph node.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub vectors: NodeId,
    pub meta: Vec<EmbeddingMeta>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn materialize(&self, g: &Graph) -> Vec<CharacterEmbedding> {
        let v = g.value(self.vectors);
        self.meta
            .iter()
            .enumerate()
            .map(|(i, m)| CharacterEmbedding {
                vector: v.row(i).to_vec(),
                meta: *m,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterEmbedding {
    pub vector: Vec<f64>,
    #[serde(flatten)]
    pub meta: EmbeddingMeta,
}

/// One learnable vector per registry character.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerEmbeddingTable {
    pub table: ParamId,
    pub characters: usize,
}

impl SpeakerEmbeddingTable {
    pub fn new<R: Rng>(store: &mut ParamStore, characters: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.insert_normal("speaker_embedding", characters, dim, 0.1, rng);
        Self { table, characters }
    }
}

fn utterance_tokens<'a>(utterances: impl Iterator<Item = &'a [String]>, sep: &'a str) -> (Vec<&'a str>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut lengths = Vec::new();
    for (i, u) in utterances.enumerate() {
        if i > 0 {
            tokens.push(sep);
        }
        tokens.extend(u.iter().map(String::as_str));
        lengths.push(u.len());
    }
    (tokens, lengths)
}

/// Encodes the utterances of a scene joined by the encoder's separator.
pub fn encode_conversation<E: EncoderContract>(
    g: &mut Graph,
    scene: &Scene,
    enc: &E,
) -> Result<SequenceEncoding, EncodingError> {
    let (tokens, lengths) = utterance_tokens(scene.utterances.iter().map(|u| u.tokens.as_slice()), enc.separator());
    let h = enc.encode(g, &tokens)?;
    Ok(SequenceEncoding::from_layout(h, &lengths))
}

/// Summary tokens as a single utterance.
pub fn encode_summary_tokens<E: EncoderContract>(
    g: &mut Graph,
    summary: &Summary,
    enc: &E,
) -> Result<SequenceEncoding, EncodingError> {
    let tokens: Vec<&str> = summary.tokens.iter().map(String::as_str).collect();
    let h = enc.encode(g, &tokens)?;
    Ok(SequenceEncoding::from_layout(h, &[tokens.len()]))
}

fn span_rows(enc: &SequenceEncoding, m: &MentionSpan) -> Result<(usize, usize), EncodingError> {
    let start = enc.row(m.utterance, m.start);
    let end = enc.row(m.utterance, m.end);
    match (start, end) {
        (Some(s), Some(e)) if m.start <= m.end => Ok((s, e)),
        _ => Err(EncodingError::UnresolvableSpan(m.mention_id)),
    }
}

/// `t_start + t_end + e_speaker` per mention.
pub fn extract_mention_embeddings(
    g: &mut Graph,
    enc: &SequenceEncoding,
    scene: &Scene,
    mentions: &[MentionSpan],
    speakers: &SpeakerEmbeddingTable,
    sample_index: usize,
) -> Result<EmbeddingBatch, EncodingError> {
    if mentions.is_empty() {
        return Err(EncodingError::EmptyInput);
    }
    let mut starts = Vec::with_capacity(mentions.len());
    let mut ends = Vec::with_capacity(mentions.len());
    let mut spk = Vec::with_capacity(mentions.len());
    for m in mentions {
        let (s, e) = span_rows(enc, m)?;
        let speaker = scene
            .speaker_of(m.utterance)
            .filter(|c| c.0 < speakers.characters)
            .ok_or(EncodingError::UnknownSpeaker(m.mention_id))?;
        starts.push(s);
        ends.push(e);
        spk.push(speaker.0);
    }
    let ts = g.select_rows(enc.h, &starts);
    let te = g.select_rows(enc.h, &ends);
    let span = g.add(ts, te);
    let sv = g.embed(speakers.table, &spk);
    let vectors = g.add(span, sv);
    let meta = mentions
        .iter()
        .map(|m| EmbeddingMeta {
            character: Some(m.gold),
            sample_index,
            source: EmbeddingSource::Conversation,
            key: m.mention_id,
        })
        .collect();
    Ok(EmbeddingBatch { vectors, meta })
}

/// Attention-pooled embeddings, one per mask. `scorer` maps `d -> 1`.
pub fn pool_speaker_embeddings(
    g: &mut Graph,
    enc: &SequenceEncoding,
    masks: &[Vec<bool>],
    scorer: &Linear,
    meta: Vec<EmbeddingMeta>,
) -> Result<EmbeddingBatch, EncodingError> {
    assert_eq!(masks.len(), meta.len(), "one metadata record per mask");
    if masks.is_empty() {
        return Err(EncodingError::EmptyInput);
    }
    for (i, m) in masks.iter().enumerate() {
        if m.len() != enc.rows {
            return Err(EncodingError::DimensionMismatch {
                expected: enc.rows,
                actual: m.len(),
            });
        }
        if !m.iter().any(|&b| b) {
            return Err(EncodingError::EmptyMask(meta[i].key));
        }
    }
    let scores = scorer.forward(g, enc.h);
    let scores = g.transpose(scores);
    let tiled = g.select_rows(scores, &vec![0; masks.len()]);
    let weights = g.masked_softmax_rows(tiled, masks);
    let vectors = g.matmul(weights, enc.h);
    Ok(EmbeddingBatch { vectors, meta })
}

/// Token masks selecting the utterances of each anonymous slot, in order of
/// first appearance, with metadata keyed by slot number.
pub fn slot_masks(scene: &Scene, enc: &SequenceEncoding, sample_index: usize) -> (Vec<Vec<bool>>, Vec<EmbeddingMeta>) {
    let slots = scene.anonymous_slots();
    let mut masks = Vec::with_capacity(slots.len());
    let mut meta = Vec::with_capacity(slots.len());
    for slot in slots {
        let mut mask = vec![false; enc.rows];
        for u in &scene.utterances {
            if u.speaker == SpeakerSlot::Anonymous(slot) {
                for off in 0..u.tokens.len() {
                    if let Some(r) = enc.row(u.index, off) {
                        mask[r] = true;
                    }
                }
            }
        }
        masks.push(mask);
        meta.push(EmbeddingMeta {
            character: scene.speaker_labels.get(&slot).copied(),
            sample_index,
            source: EmbeddingSource::Conversation,
            key: slot,
        });
    }
    (masks, meta)
}

/// `t_start + t_end` per summary mention; no speaker term.
pub fn encode_summary<E: EncoderContract>(
    g: &mut Graph,
    summary: &Summary,
    enc: &E,
    sample_index: usize,
) -> Result<Option<EmbeddingBatch>, EncodingError> {
    if summary.mentions.is_empty() {
        return Ok(None);
    }
    let seq = encode_summary_tokens(g, summary, enc)?;
    let mut starts = Vec::with_capacity(summary.mentions.len());
    let mut ends = Vec::with_capacity(summary.mentions.len());
    for m in &summary.mentions {
        let (s, e) = span_rows(&seq, m)?;
        starts.push(s);
        ends.push(e);
    }
    let ts = g.select_rows(seq.h, &starts);
    let te = g.select_rows(seq.h, &ends);
    let vectors = g.add(ts, te);
    let meta = summary
        .mentions
        .iter()
        .map(|m| EmbeddingMeta {
            character: Some(m.gold),
            sample_index,
            source: EmbeddingSource::Summary,
            key: m.mention_id,
        })
        .collect();
    Ok(Some(EmbeddingBatch { vectors, meta }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlsaConfig {
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
}

impl Default for MlsaConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 2,
            ff: 64,
        }
    }
}

/// Mention-level self-attention: transformer blocks over the embedding
/// axis, with no positional signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlsa {
    pub config: MlsaConfig,
    pub blocks: Vec<TransformerBlock>,
}

impl Mlsa {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, config: MlsaConfig, rng: &mut R) -> Self {
        assert!(config.blocks >= 1, "MLSA needs at least one block");
        let blocks = (0..config.blocks)
            .map(|b| TransformerBlock::new(store, &format!("{name}.block{b}"), dim, config.heads, config.ff, rng))
            .collect();
        Self { config, blocks }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.blocks.iter().fold(x, |h, b| b.forward(g, h))
    }

    pub fn refine(&self, g: &mut Graph, batch: &EmbeddingBatch) -> Result<EmbeddingBatch, EncodingError> {
        if batch.is_empty() {
            return Err(EncodingError::EmptyInput);
        }
        Ok(EmbeddingBatch {
            vectors: self.forward(g, batch.vectors),
            meta: batch.meta.clone(),
        })
    }
}

/// Eager MLSA over plain vectors; order and metadata are preserved.
pub fn mlsa_refine(
    store: &ParamStore,
    mlsa: &Mlsa,
    embeddings: &[CharacterEmbedding],
) -> Result<Vec<CharacterEmbedding>, EncodingError> {
    let Some(first) = embeddings.first() else {
        return Err(EncodingError::EmptyInput);
    };
    let d = first.vector.len();
    if let Some(bad) = embeddings.iter().find(|e| e.vector.len() != d) {
        return Err(EncodingError::DimensionMismatch {
            expected: d,
            actual: bad.vector.len(),
        });
    }
    let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let mut g = Graph::new(store);
    let x = g.input(Matrix::from_rows(&rows));
    let batch = EmbeddingBatch {
        vectors: x,
        meta: embeddings.iter().map(|e| e.meta).collect(),
    };
    let out = mlsa.refine(&mut g, &batch)?;
    Ok(out.materialize(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, Utterance};
    use crate::gradcheck::first_mismatch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn scene() -> Scene {
        let utt = |speaker, text: &str, index| Utterance {
            speaker,
            tokens: words(text),
            index,
        };
        Scene {
            scene_id: "s".into(),
            split: Split::Train,
            utterances: vec![
                utt(SpeakerSlot::Known(CharacterId(0)), "i told you so ross", 0),
                utt(SpeakerSlot::Known(CharacterId(1)), "no you did not", 1),
            ],
            mentions: vec![
                MentionSpan { mention_id: 0, utterance: 0, start: 0, end: 0, gold: CharacterId(0) },
                MentionSpan { mention_id: 1, utterance: 0, start: 4, end: 4, gold: CharacterId(1) },
                MentionSpan { mention_id: 2, utterance: 1, start: 1, end: 1, gold: CharacterId(0) },
            ],
            speaker_labels: BTreeMap::new(),
            summary_ref: None,
        }
    }

    fn toy(store: &mut ParamStore, d: usize, seed: u64) -> ToyEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::from_tokens("i told you so ross no did not monica".split(' '));
        let cfg = EncoderConfig {
            hidden: d,
            heads: 2,
            ff: 2 * d,
            max_length: 16,
        };
        ToyEncoder::new(cfg, vocab, store, &mut rng)
    }

    #[test]
    fn conversation_rows_count_separators() {
        let mut store = ParamStore::new();
        let enc = toy(&mut store, 8, 1);
        let mut g = Graph::new(&store);
        let seq = encode_conversation(&mut g, &scene(), &enc).unwrap();
        assert_eq!(seq.rows, 10);
        assert_eq!(g.shape(seq.h), (10, 8));
        assert_eq!(seq.row(1, 0), Some(6));
        assert_eq!(seq.token_map.len(), 9);

        let mut g2 = Graph::new(&store);
        let again = encode_conversation(&mut g2, &scene(), &enc).unwrap();
        assert_eq!(g.value(seq.h), g2.value(again.h));
    }

    #[test]
    fn conversation_errors() {
        let mut store = ParamStore::new();
        let enc = toy(&mut store, 8, 1);
        let mut g = Graph::new(&store);
        let mut empty = scene();
        empty.utterances.clear();
        assert_eq!(encode_conversation(&mut g, &empty, &enc).unwrap_err(), EncodingError::EmptyInput);
        let mut long = scene();
        long.utterances[0].tokens = words("so so so so so so so so so so so so");
        assert_eq!(
            encode_conversation(&mut g, &long, &enc).unwrap_err(),
            EncodingError::TooLong { actual: 17, max: 16 }
        );
    }

    #[test]
    fn mention_is_start_plus_end_plus_speaker() {
        let mut store = ParamStore::new();
        let speakers = SpeakerEmbeddingTable {
            table: store.insert("speaker_embedding", Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]])),
            characters: 2,
        };
        let mut g = Graph::new(&store);
        let h = g.input(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![3.0, -1.0]]));
        let seq = SequenceEncoding::from_layout(h, &[2, 1]);
        let mut sc = scene();
        sc.mentions = vec![
            MentionSpan { mention_id: 0, utterance: 0, start: 0, end: 1, gold: CharacterId(0) },
            MentionSpan { mention_id: 1, utterance: 1, start: 0, end: 0, gold: CharacterId(1) },
        ];
        let batch = extract_mention_embeddings(&mut g, &seq, &sc, &sc.mentions, &speakers, 3).unwrap();
        let out = batch.materialize(&g);
        assert_eq!(out[0].vector, vec![2.0, 2.0]);
        // speaker 1 has a zero vector: e = 2 H[k]
        assert_eq!(out[1].vector, vec![6.0, -2.0]);
        assert_eq!(out[1].meta.sample_index, 3);
        assert_eq!(out[1].meta.character, Some(CharacterId(1)));
    }

    #[test]
    fn unresolvable_span() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let speakers = SpeakerEmbeddingTable::new(&mut store, 2, 2, &mut rng);
        let mut g = Graph::new(&store);
        let h = g.input(Matrix::zeros(2, 2));
        let seq = SequenceEncoding::from_layout(h, &[2]);
        let sc = scene();
        let bad = [MentionSpan { mention_id: 7, utterance: 0, start: 1, end: 2, gold: CharacterId(0) }];
        assert_eq!(
            extract_mention_embeddings(&mut g, &seq, &sc, &bad, &speakers, 0).unwrap_err(),
            EncodingError::UnresolvableSpan(7)
        );
    }

    fn meta(n: usize) -> Vec<EmbeddingMeta> {
        (0..n)
            .map(|key| EmbeddingMeta {
                character: None,
                sample_index: 0,
                source: EmbeddingSource::Conversation,
                key,
            })
            .collect()
    }

    #[test]
    fn pooling_singleton_and_tie() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scorer = Linear::new(&mut store, "scorer", 2, 1, false, &mut rng);
        let rows = [vec![1.0, 2.0], vec![-1.0, 0.5], vec![4.0, 4.0]];
        let mut g = Graph::new(&store);
        let h = g.input(Matrix::from_rows(&rows));
        let seq = SequenceEncoding::from_layout(h, &[3]);
        let masks = vec![vec![false, true, false], vec![true, false, true]];
        let out = pool_speaker_embeddings(&mut g, &seq, &masks, &scorer, meta(2)).unwrap().materialize(&g);
        assert_eq!(out[0].vector, rows[1]);

        *store.get_mut(scorer.weight) = Matrix::zeros(2, 1);
        let mut g = Graph::new(&store);
        let h = g.input(Matrix::from_rows(&rows));
        let out = pool_speaker_embeddings(&mut g, &seq_with(h), &masks, &scorer, meta(2)).unwrap().materialize(&g);
        assert_eq!(out[1].vector, vec![2.5, 3.0]);
    }

    fn seq_with(h: NodeId) -> SequenceEncoding {
        SequenceEncoding::from_layout(h, &[3])
    }

    #[test]
    fn pooling_empty_mask() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scorer = Linear::new(&mut store, "scorer", 2, 1, false, &mut rng);
        let mut g = Graph::new(&store);
        let h = g.input(Matrix::zeros(3, 2));
        let err = pool_speaker_embeddings(&mut g, &seq_with(h), &[vec![false; 3]], &scorer, meta(1)).unwrap_err();
        assert_eq!(err, EncodingError::EmptyMask(0));
    }

    #[test]
    fn slot_masks_cover_slot_utterances() {
        let sc = scene().masked_for_guessing();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = g.input(Matrix::zeros(10, 2));
        let seq = SequenceEncoding::from_layout(h, &[5, 4]);
        let (masks, meta) = slot_masks(&sc, &seq, 0);
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0].iter().filter(|&&b| b).count(), 5);
        assert!(!masks[0][5] && !masks[1][5]);
        assert_eq!(meta[1].character, Some(CharacterId(1)));
    }

    #[test]
    fn summary_embeddings() {
        let mut store = ParamStore::new();
        let enc = toy(&mut store, 8, 2);
        let summary = Summary {
            summary_id: "x".into(),
            tokens: words("ross told monica"),
            mentions: vec![
                MentionSpan { mention_id: 0, utterance: 0, start: 0, end: 0, gold: CharacterId(0) },
                MentionSpan { mention_id: 1, utterance: 0, start: 2, end: 2, gold: CharacterId(1) },
            ],
        };
        let mut g = Graph::new(&store);
        let batch = encode_summary(&mut g, &summary, &enc, 0).unwrap().unwrap();
        let out = batch.materialize(&g);
        let mut g2 = Graph::new(&store);
        let seq = encode_summary_tokens(&mut g2, &summary, &enc).unwrap();
        let h = g2.value(seq.h);
        for (i, k) in [(0, 0), (1, 2)] {
            let want: Vec<f64> = h.row(k).iter().map(|x| 2.0 * x).collect();
            assert_eq!(out[i].vector, want);
            assert_eq!(out[i].meta.source, EmbeddingSource::Summary);
        }
        let none = Summary { mentions: vec![], ..summary };
        assert!(encode_summary(&mut g, &none, &enc, 0).unwrap().is_none());
    }

    fn random_embeddings(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<CharacterEmbedding> {
        (0..n)
            .map(|i| CharacterEmbedding {
                vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                meta: EmbeddingMeta {
                    character: Some(CharacterId(i % 3)),
                    sample_index: i,
                    source: EmbeddingSource::Summary,
                    key: i,
                },
            })
            .collect()
    }

    #[test]
    fn mlsa_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mlsa = Mlsa::new(&mut store, "mlsa", 8, MlsaConfig { blocks: 2, heads: 2, ff: 16 }, &mut rng);
        let embs = random_embeddings(5, 8, &mut rng);
        let base = mlsa_refine(&store, &mlsa, &embs).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<_> = perm.iter().map(|&i| embs[i].clone()).collect();
        let out = mlsa_refine(&store, &mlsa, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(out[j].meta, base[i].meta);
            for (a, b) in out[j].vector.iter().zip(&base[i].vector) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(mlsa_refine(&store, &mlsa, &[]).is_err());
    }

    #[test]
    fn mlsa_is_block_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mlsa = Mlsa::new(&mut store, "mlsa", 4, MlsaConfig { blocks: 2, heads: 1, ff: 8 }, &mut rng);
        let embs = random_embeddings(3, 4, &mut rng);
        let full = mlsa_refine(&store, &mlsa, &embs).unwrap();
        let one = |b: &TransformerBlock, e: &[CharacterEmbedding]| {
            let single = Mlsa {
                config: MlsaConfig { blocks: 1, ..mlsa.config.clone() },
                blocks: vec![b.clone()],
            };
            mlsa_refine(&store, &single, e).unwrap()
        };
        let stepped = one(&mlsa.blocks[1], &one(&mlsa.blocks[0], &embs));
        assert_eq!(full, stepped);
    }

    /// Central differences over every entry of every parameter in `store`.
    fn check_param_grads(store: &ParamStore, f: impl Fn(&mut Graph) -> NodeId) {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let grads = g.backward(out).into_param_grads(store);
        let h = 1e-5;
        for id in store.ids() {
            let mut numeric = Vec::new();
            for k in 0..store.get(id).data.len() {
                let mut s = store.clone();
                s.get_mut(id).data[k] += h;
                let mut gp = Graph::new(&s);
                let up = f(&mut gp);
                let up = gp.scalar(up);
                s.get_mut(id).data[k] -= 2.0 * h;
                let mut gm = Graph::new(&s);
                let down = f(&mut gm);
                let down = gm.scalar(down);
                numeric.push((up - down) / (2.0 * h));
            }
            if let Some((i, a, n)) = first_mismatch(&grads[id.0].data, &numeric, 1e-3, 1e-7) {
                panic!("{}[{i}]: analytic {a} numeric {n}", store.name(id));
            }
        }
    }

    fn probe(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        let (r, c) = g.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = g.input(w);
        let y = g.mul(x, w);
        g.sum(y)
    }

    #[test]
    fn gradients_through_mentions_and_summary() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let enc = toy(&mut store, 4, 9);
        let speakers = SpeakerEmbeddingTable::new(&mut store, 2, 4, &mut rng);
        let mlsa = Mlsa::new(&mut store, "mlsa", 4, MlsaConfig { blocks: 1, heads: 2, ff: 8 }, &mut rng);
        let sc = scene();
        let summary = Summary {
            summary_id: "x".into(),
            tokens: words("ross told monica so"),
            mentions: vec![
                MentionSpan { mention_id: 0, utterance: 0, start: 0, end: 0, gold: CharacterId(0) },
                MentionSpan { mention_id: 1, utterance: 0, start: 2, end: 3, gold: CharacterId(1) },
            ],
        };
        check_param_grads(&store, |g| {
            let seq = encode_conversation(g, &sc, &enc).unwrap();
            let m = extract_mention_embeddings(g, &seq, &sc, &sc.mentions, &speakers, 0).unwrap();
            let m = mlsa.refine(g, &m).unwrap();
            let s = encode_summary(g, &summary, &enc, 0).unwrap().unwrap();
            let s = mlsa.refine(g, &s).unwrap();
            let a = probe(g, m.vectors, 1);
            let b = probe(g, s.vectors, 2);
            g.weighted_sum(&[(a, 1.0), (b, 0.5)])
        });
    }

    #[test]
    fn gradients_through_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let enc = toy(&mut store, 4, 10);
        let scorer = Linear::new(&mut store, "scorer", 4, 1, false, &mut rng);
        let sc = scene().masked_for_guessing();
        check_param_grads(&store, |g| {
            let seq = encode_conversation(g, &sc, &enc).unwrap();
            let (masks, meta) = slot_masks(&sc, &seq, 0);
            let p = pool_speaker_embeddings(g, &seq, &masks, &scorer, meta).unwrap();
            probe(g, p.vectors, 3)
        });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pooled_vector_in_convex_hull(
                rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..7),
                w in proptest::collection::vec(-3.0f64..3.0, 3),
                mask_bits in proptest::collection::vec(any::<bool>(), 7),
            ) {
                let n = rows.len();
                let mut mask: Vec<bool> = mask_bits[..n].to_vec();
                mask[0] = true;
                let mut store = ParamStore::new();
                let scorer = Linear { weight: store.insert("w", Matrix::from_vec(3, 1, w)), bias: None };
                let mut g = Graph::new(&store);
                let h = g.input(Matrix::from_rows(&rows));
                let seq = SequenceEncoding::from_layout(h, &[n]);
                let out = pool_speaker_embeddings(&mut g, &seq, &[mask.clone()], &scorer, meta(1)).unwrap();
                let v = g.value(out.vectors).row(0).to_vec();
                for c in 0..3 {
                    let sel = rows.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| r[c]);
                    let lo = sel.clone().fold(f64::INFINITY, f64::min);
                    let hi = sel.fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v[c] >= lo - 1e-12 && v[c] <= hi + 1e-12);
                }
            }

            #[test]
            fn mention_extraction_is_linear(
                a in proptest::collection::vec(-2.0f64..2.0, 8),
                b in proptest::collection::vec(-2.0f64..2.0, 8),
                s in -2.0f64..2.0,
            ) {
                let sc = {
                    let mut sc = scene();
                    sc.mentions = vec![MentionSpan { mention_id: 0, utterance: 1, start: 0, end: 1, gold: CharacterId(0) }];
                    sc
                };
                let run = |h: Vec<f64>, spk: Vec<f64>| {
                    let mut store = ParamStore::new();
                    let table = SpeakerEmbeddingTable {
                        table: store.insert("speaker_embedding", Matrix::from_vec(2, 2, spk)),
                        characters: 2,
                    };
                    let mut g = Graph::new(&store);
                    let h = g.input(Matrix::from_vec(4, 2, h));
                    let seq = SequenceEncoding::from_layout(h, &[1, 2]);
                    let out = extract_mention_embeddings(&mut g, &seq, &sc, &sc.mentions, &table, 0).unwrap();
                    g.value(out.vectors).data.clone()
                };
                let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
                let lhs = run(combo[..8].to_vec(), combo[4..8].to_vec());
                let ra = run(a.clone(), a[4..8].to_vec());
                let rb = run(b.clone(), b[4..8].to_vec());
                for k in 0..lhs.len() {
                    prop_assert!((lhs[k] - (ra[k] + s * rb[k])).abs() < 1e-9);
                }
            }
        }
    }
}
