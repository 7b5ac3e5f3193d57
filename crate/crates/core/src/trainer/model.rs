use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Task, TrainConfig};
use super::optim::Adam;
use super::TrainError;
use crate::autograd::{Graph, NodeId, ParamStore};
use crate::data::{CharacterRegistry, Corpus, Scene, Summary};
use crate::encoding::{
    encode_conversation, encode_summary, extract_mention_embeddings, pool_speaker_embeddings, slot_masks,
    EmbeddingBatch, EncodingError, Linear, Mlsa, SpeakerEmbeddingTable, ToyEncoder, Vocab,
};
use crate::objectives::ClassifierHead;

/// Encoder, speaker table, attention scorer, MLSA stack(s) and classifier
/// head over one parameter store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub task: Task,
    pub config: ModelConfig,
    pub registry: Vec<String>,
    pub store: ParamStore,
    pub encoder: ToyEncoder,
    pub speakers: SpeakerEmbeddingTable,
    pub scorer: Linear,
    pub mlsa: Mlsa,
    /// Separate conversation-side stack when MLSA is not shared.
    pub conversation_mlsa: Option<Mlsa>,
    pub head: ClassifierHead,
}

impl Model {
    pub fn new<R: Rng>(task: Task, config: &ModelConfig, corpus: &Corpus, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let d = config.hidden;
        let z = corpus.registry.len();
        let encoder = ToyEncoder::new(config.encoder(), Vocab::from_corpus(corpus), &mut store, rng);
        let speakers = SpeakerEmbeddingTable::new(&mut store, z, d, rng);
        let scorer = Linear::new(&mut store, "pool.scorer", d, 1, false, rng);
        let mlsa = Mlsa::new(&mut store, "mlsa", d, config.mlsa(), rng);
        let conversation_mlsa =
            (!config.share_mlsa).then(|| Mlsa::new(&mut store, "mlsa_conversation", d, config.mlsa(), rng));
        let head = ClassifierHead::new(&mut store, "head", d, z, config.head_depth, rng);
        Self {
            task,
            config: config.clone(),
            registry: corpus.registry.names().to_vec(),
            store,
            encoder,
            speakers,
            scorer,
            mlsa,
            conversation_mlsa,
            head,
        }
    }

    /// Restores lookup indexes skipped by serialization.
    pub fn reindex(&mut self) {
        self.store.reindex();
        self.encoder.vocab.reindex();
    }

    pub fn check_registry(&self, registry: &CharacterRegistry) -> Result<(), TrainError> {
        if self.registry != registry.names() {
            return Err(TrainError::IncompatibleCheckpoint(format!(
                "checkpoint registry has {} characters, corpus registry has {} (or names differ)",
                self.registry.len(),
                registry.len()
            )));
        }
        Ok(())
    }

    fn conversation_stack(&self) -> &Mlsa {
        self.conversation_mlsa.as_ref().unwrap_or(&self.mlsa)
    }

    /// Refined conversation-side embeddings: pooled slots for guessing,
    /// mentions otherwise. `None` when the scene has neither.
    pub fn conversation(
        &self,
        g: &mut Graph,
        scene: &Scene,
        sample_index: usize,
    ) -> Result<Option<EmbeddingBatch>, EncodingError> {
        let raw = match self.task {
            Task::Guessing => {
                if scene.anonymous_slots().is_empty() {
                    return Ok(None);
                }
                let seq = encode_conversation(g, scene, &self.encoder)?;
                let (masks, meta) = slot_masks(scene, &seq, sample_index);
                pool_speaker_embeddings(g, &seq, &masks, &self.scorer, meta)?
            }
            Task::Linking | Task::Coref => {
                if scene.mentions.is_empty() {
                    return Ok(None);
                }
                let seq = encode_conversation(g, scene, &self.encoder)?;
                extract_mention_embeddings(g, &seq, scene, &scene.mentions, &self.speakers, sample_index)?
            }
        };
        self.conversation_stack().refine(g, &raw).map(Some)
    }

    pub fn summary(
        &self,
        g: &mut Graph,
        summary: &Summary,
        sample_index: usize,
    ) -> Result<Option<EmbeddingBatch>, EncodingError> {
        match encode_summary(g, summary, &self.encoder, sample_index)? {
            Some(raw) => self.mlsa.refine(g, &raw).map(Some),
            None => Ok(None),
        }
    }

    pub fn logits(&self, g: &mut Graph, vectors: NodeId) -> NodeId {
        self.head.logits(g, vectors)
    }
}

pub const CHECKPOINT_FORMAT: &str = "charcl-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: Task,
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_length: usize,
    pub mlsa_blocks: usize,
    pub characters: usize,
    pub manifest: Vec<ParamManifestEntry>,
}

/// Single-file checkpoint archive (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub metadata: CheckpointMeta,
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    /// Stage and epoch the parameters were taken from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<(u8, usize)>,
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: Option<Adam>, config: Option<TrainConfig>) -> Self {
        let metadata = CheckpointMeta {
            task: model.task,
            hidden: model.config.hidden,
            vocab_size: model.encoder.vocab.len(),
            max_length: model.config.max_length,
            mlsa_blocks: model.config.mlsa_blocks,
            characters: model.registry.len(),
            manifest: model
                .store
                .iter()
                .map(|(name, m)| ParamManifestEntry {
                    name: name.to_string(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            metadata,
            model,
            optimizer,
            config,
            epoch: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let fail = |e: &dyn std::fmt::Display| TrainError::CheckpointWriteFailure {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let text = serde_json::to_string(self).map_err(|e| fail(&e))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| fail(&e))?;
        }
        fs::write(path, text).map_err(|e| fail(&e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::IncompatibleCheckpoint(format!("{}: {m}", path.display()));
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let mut ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format {:?}", ck.format)));
        }
        ck.model.reindex();
        ck.verify().map_err(bad)?;
        Ok(ck)
    }

    fn verify(&self) -> Result<(), String> {
        let m = &self.model;
        let meta = &self.metadata;
        if meta.hidden != m.config.hidden
            || meta.vocab_size != m.encoder.vocab.len()
            || meta.max_length != m.config.max_length
            || meta.mlsa_blocks != m.mlsa.blocks.len()
            || meta.characters != m.registry.len()
        {
            return Err("metadata disagrees with model".into());
        }
        if meta.manifest.len() != m.store.len() {
            return Err("parameter manifest length mismatch".into());
        }
        for (entry, (name, value)) in meta.manifest.iter().zip(m.store.iter()) {
            if entry.name != name || (entry.rows, entry.cols) != value.shape() || value.data.len() != value.rows * value.cols {
                return Err(format!("parameter {name} does not match manifest"));
            }
        }
        Ok(())
    }
}
