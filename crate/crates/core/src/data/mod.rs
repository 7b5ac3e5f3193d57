//! Corpus data model: scenes, summaries, the character registry and
//! conversation/summary alignment.

mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_corpus, validate_corpus, write_corpus, SPLIT_FILES, SUMMARY_FILE, REGISTRY_FILE};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

/// Dense 0-based index into the [`CharacterRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CharacterId(pub usize);

impl fmt::Display for CharacterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const OTHER_NAME: &str = "#OTHER#";
pub const GENERAL_NAME: &str = "#GENERAL#";

#[derive(Debug, Error, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum DataError {
    #[error("{file}:{line}: malformed record: {reason}")]
    MalformedRecord {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}:{line}: unknown character {name:?}")]
    UnknownCharacter {
        file: String,
        line: usize,
        name: String,
    },
    #[error("scene {scene_id} references missing summary {summary_ref}")]
    DanglingSummaryRef { scene_id: String, summary_ref: String },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Which annotation layout a corpus file follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Named speakers, annotated mentions.
    LinkingCoref,
    /// Anonymous speaker slots `P0, P1, ...` with gold labels.
    Guessing,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linking_coref" | "linking" | "coref" => Ok(CorpusFormat::LinkingCoref),
            "guessing" => Ok(CorpusFormat::Guessing),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

/// The pre-defined character set, with `#OTHER#` and `#GENERAL#` as
/// ordinary (reserved) entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterRegistry {
    names: Vec<String>,
}

impl CharacterRegistry {
    /// Builds a registry from names in id order, appending the reserved
    /// entries when absent. Fails on duplicate names.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, String> {
        let mut out: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for name in names {
            let name = name.into();
            if name.is_empty() {
                return Err("empty character name".into());
            }
            if !seen.insert(name.clone()) {
                return Err(format!("duplicate character name {name:?}"));
            }
            out.push(name);
        }
        for reserved in [OTHER_NAME, GENERAL_NAME] {
            if !seen.contains(reserved) {
                out.push(reserved.to_string());
            }
        }
        Ok(Self { names: out })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: CharacterId) -> Option<&str> {
        self.names.get(id.0).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<CharacterId> {
        self.names.iter().position(|n| n == name).map(CharacterId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn other(&self) -> CharacterId {
        self.id(OTHER_NAME).expect("reserved entry present")
    }

    pub fn general(&self) -> CharacterId {
        self.id(GENERAL_NAME).expect("reserved entry present")
    }

    pub fn is_reserved(&self, id: CharacterId) -> bool {
        matches!(self.name(id), Some(OTHER_NAME) | Some(GENERAL_NAME))
    }

    pub fn contains(&self, id: CharacterId) -> bool {
        id.0 < self.names.len()
    }

    /// Ids of ordinary (non-reserved) characters.
    pub fn characters(&self) -> impl Iterator<Item = CharacterId> + '_ {
        (0..self.names.len())
            .map(CharacterId)
            .filter(|&id| !self.is_reserved(id))
    }
}

/// Who spoke an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpeakerSlot {
    Known(CharacterId),
    /// Masked speaker `P<n>`; the same slot index is the same speaker
    /// within a scene.
    Anonymous(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: SpeakerSlot,
    pub tokens: Vec<String>,
    pub index: usize,
}

/// Inclusive token span `[start, end]` inside one utterance (or the summary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    pub mention_id: usize,
    pub utterance: usize,
    pub start: usize,
    pub end: usize,
    pub gold: CharacterId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
    pub mentions: Vec<MentionSpan>,
    pub speaker_labels: BTreeMap<usize, CharacterId>,
    pub summary_ref: Option<String>,
}

impl Scene {
    /// Anonymous slots in order of first appearance.
    pub fn anonymous_slots(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for u in &self.utterances {
            if let SpeakerSlot::Anonymous(s) = u.speaker {
                if seen.insert(s) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Resolved speaker of an utterance, if known or labeled.
    pub fn speaker_of(&self, utterance: usize) -> Option<CharacterId> {
        match self.utterances.get(utterance)?.speaker {
            SpeakerSlot::Known(c) => Some(c),
            SpeakerSlot::Anonymous(s) => self.speaker_labels.get(&s).copied(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }

    /// Characters with at least one conversation-side representation
    /// (a mention or a labeled anonymous slot).
    pub fn represented_characters(&self) -> BTreeSet<CharacterId> {
        let mut out: BTreeSet<CharacterId> = self.mentions.iter().map(|m| m.gold).collect();
        for slot in self.anonymous_slots() {
            if let Some(&c) = self.speaker_labels.get(&slot) {
                out.insert(c);
            }
        }
        out
    }

    /// Converts named speakers into anonymous slots `P0, P1, ...` by order of
    /// first appearance and drops mention annotations.
    pub fn masked_for_guessing(&self) -> Scene {
        let mut slot_of: BTreeMap<CharacterId, usize> = BTreeMap::new();
        let mut labels = BTreeMap::new();
        let utterances = self
            .utterances
            .iter()
            .map(|u| {
                let speaker = match u.speaker {
                    SpeakerSlot::Known(c) => {
                        let next = slot_of.len();
                        let slot = *slot_of.entry(c).or_insert(next);
                        labels.insert(slot, c);
                        SpeakerSlot::Anonymous(slot)
                    }
                    anon => anon,
                };
                Utterance {
                    speaker,
                    tokens: u.tokens.clone(),
                    index: u.index,
                }
            })
            .collect();
        let mut speaker_labels = self.speaker_labels.clone();
        speaker_labels.extend(labels);
        Scene {
            scene_id: self.scene_id.clone(),
            split: self.split,
            utterances,
            mentions: Vec::new(),
            speaker_labels,
            summary_ref: self.summary_ref.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub summary_id: String,
    pub tokens: Vec<String>,
    /// Spans into `tokens`; `utterance` is always 0.
    pub mentions: Vec<MentionSpan>,
}

impl Summary {
    pub fn mentioned_characters(&self) -> BTreeSet<CharacterId> {
        self.mentions.iter().map(|m| m.gold).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub registry: CharacterRegistry,
    /// Sorted by `scene_id`.
    pub scenes: Vec<Scene>,
    pub summaries: BTreeMap<String, Summary>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn summary_for(&self, scene: &Scene) -> Option<&Summary> {
        scene.summary_ref.as_ref().and_then(|r| self.summaries.get(r))
    }

    /// Whether every scene uses anonymous speaker slots.
    pub fn is_guessing(&self) -> bool {
        self.scenes
            .iter()
            .flat_map(|s| &s.utterances)
            .all(|u| matches!(u.speaker, SpeakerSlot::Anonymous(_)))
    }

    pub fn masked_for_guessing(&self) -> Corpus {
        Corpus {
            registry: self.registry.clone(),
            scenes: self.scenes.iter().map(Scene::masked_for_guessing).collect(),
            summaries: self.summaries.clone(),
        }
    }

    /// Aligned (scene, summary) samples for every scene with a summary.
    pub fn aligned(&self, split: Split) -> Vec<AlignedSample<'_>> {
        self.split(split)
            .filter_map(|s| self.summary_for(s).map(|sum| align_characters(s, sum, &self.registry)))
            .collect()
    }
}

/// A scene paired with its summary and the characters present on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample<'a> {
    pub scene: &'a Scene,
    pub summary: &'a Summary,
    /// Sorted ascending; reserved registry entries are never included.
    pub shared_characters: Vec<CharacterId>,
}

/// Characters represented on both the conversation and the summary side.
/// A character seen on only one side is left out.
pub fn align_characters<'a>(
    scene: &'a Scene,
    summary: &'a Summary,
    registry: &CharacterRegistry,
) -> AlignedSample<'a> {
    let conv = scene.represented_characters();
    let summ = summary.mentioned_characters();
    let shared_characters = conv
        .intersection(&summ)
        .copied()
        .filter(|&c| !registry.is_reserved(c))
        .collect();
    AlignedSample {
        scene,
        summary,
        shared_characters,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub scenes: usize,
    pub utterances: usize,
    pub tokens: usize,
    pub mentions: usize,
    pub anonymous_slots: usize,
    pub with_summary: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub scenes: usize,
    pub mentions: usize,
    pub summaries: usize,
    pub per_split: BTreeMap<String, SplitStats>,
    /// Mentions plus labeled slots per character name.
    pub per_character: BTreeMap<String, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats {
        summaries: corpus.summaries.len(),
        ..Default::default()
    };
    for split in Split::ALL {
        stats.per_split.insert(split.as_str().to_string(), SplitStats::default());
    }
    for scene in &corpus.scenes {
        let s = stats
            .per_split
            .get_mut(scene.split.as_str())
            .expect("all splits present");
        s.scenes += 1;
        s.utterances += scene.utterances.len();
        s.tokens += scene.token_count();
        s.mentions += scene.mentions.len();
        s.anonymous_slots += scene.anonymous_slots().len();
        if corpus.summary_for(scene).is_some() {
            s.with_summary += 1;
        }
        stats.scenes += 1;
        stats.mentions += scene.mentions.len();
        let labels = scene
            .mentions
            .iter()
            .map(|m| m.gold)
            .chain(scene.anonymous_slots().into_iter().filter_map(|slot| scene.speaker_labels.get(&slot).copied()));
        for c in labels {
            let name = corpus.registry.name(c).unwrap_or("?").to_string();
            *stats.per_character.entry(name).or_default() += 1;
        }
    }
    stats
}
