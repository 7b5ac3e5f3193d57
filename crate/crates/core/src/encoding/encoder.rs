use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, TransformerBlock};
use super::EncodingError;
use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::data::{Corpus, Split};

pub const UNK_TOKEN: &str = "[UNK]";
pub const SEP_TOKEN: &str = "[SEP]";

/// What any sequence encoder must provide to the rest of the pipeline.
pub trait EncoderContract {
    fn hidden_size(&self) -> usize;
    fn max_length(&self) -> usize;
    /// Token inserted between concatenated utterances.
    fn separator(&self) -> &str;
    /// One output row per input token. Inputs longer than
    /// [`max_length`](Self::max_length) are rejected, never truncated.
    fn encode(&self, g: &mut Graph, tokens: &[&str]) -> Result<NodeId, EncodingError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Special tokens first, then the given tokens in sorted order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: BTreeSet<&str> = tokens.into_iter().collect();
        set.remove(UNK_TOKEN);
        set.remove(SEP_TOKEN);
        let mut all = vec![UNK_TOKEN.to_string(), SEP_TOKEN.to_string()];
        all.extend(set.into_iter().map(str::to_string));
        Self::from_list(all)
    }

    pub fn from_list(tokens: Vec<String>) -> Self {
        let mut v = Self {
            tokens,
            index: BTreeMap::new(),
        };
        v.reindex();
        v
    }

    /// Vocabulary over training scenes and the summaries they reference.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut toks: Vec<&str> = Vec::new();
        for scene in corpus.split(Split::Train) {
            toks.extend(scene.utterances.iter().flat_map(|u| u.tokens.iter().map(String::as_str)));
            if let Some(s) = corpus.summary_for(scene) {
                toks.extend(s.tokens.iter().map(String::as_str));
            }
        }
        Self::from_tokens(toks)
    }

    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 2,
            ff: 64,
            max_length: 512,
        }
    }
}

/// Trainable token and position embeddings followed by one transformer
/// block and a final layer norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub block: TransformerBlock,
    pub final_norm: LayerNorm,
}

impl ToyEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, vocab: Vocab, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = config.hidden;
        let token_embedding = store.insert_normal("encoder.token_embedding", vocab.len(), d, 1.0, rng);
        let position_embedding =
            store.insert_normal("encoder.position_embedding", config.max_length, d, 0.1, rng);
        let block = TransformerBlock::new(store, "encoder.block0", d, config.heads, config.ff, rng);
        let final_norm = LayerNorm::new(store, "encoder.final_norm", d);
        Self {
            config,
            vocab,
            token_embedding,
            position_embedding,
            block,
            final_norm,
        }
    }
}

impl EncoderContract for ToyEncoder {
    fn hidden_size(&self) -> usize {
        self.config.hidden
    }

    fn max_length(&self) -> usize {
        self.config.max_length
    }

    fn separator(&self) -> &str {
        SEP_TOKEN
    }

    fn encode(&self, g: &mut Graph, tokens: &[&str]) -> Result<NodeId, EncodingError> {
        if tokens.is_empty() {
            return Err(EncodingError::EmptyInput);
        }
        if tokens.len() > self.config.max_length {
            return Err(EncodingError::TooLong {
                actual: tokens.len(),
                max: self.config.max_length,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.embed(self.token_embedding, &ids);
        let pos = g.embed(self.position_embedding, &positions);
        let x = g.add(tok, pos);
        let h = self.block.forward(g, x);
        Ok(self.final_norm.forward(g, h))
    }
}
