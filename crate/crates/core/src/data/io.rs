//! Line-delimited JSON corpus files.
//!
//! A corpus directory holds `registry.txt` (one character name per line, the
//! 0-based line number is the id), up to three split files `train.jsonl`,
//! `dev.jsonl`, `test.jsonl`, and optionally `summaries.jsonl`. Every line is
//! either a scene record (has `scene_id`) or a summary record (has
//! `summary_id`); summary records may live in any of the files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    CharacterId, CharacterRegistry, Corpus, CorpusFormat, DataError, MentionSpan, Scene, SpeakerSlot,
    Split, Summary, Utterance,
};

pub const REGISTRY_FILE: &str = "registry.txt";
pub const SUMMARY_FILE: &str = "summaries.jsonl";
pub const SPLIT_FILES: [(Split, &str); 3] = [
    (Split::Train, "train.jsonl"),
    (Split::Dev, "dev.jsonl"),
    (Split::Test, "test.jsonl"),
];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    speaker: String,
    tokens: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MentionRecord {
    #[serde(default)]
    utt: usize,
    start: usize,
    end: usize,
    gold: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: String,
    utterances: Vec<UtteranceRecord>,
    #[serde(default)]
    mentions: Vec<MentionRecord>,
    #[serde(default)]
    speaker_labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    summary_ref: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryRecord {
    summary_id: String,
    tokens: Vec<String>,
    #[serde(default)]
    mentions: Vec<MentionRecord>,
}

fn parse_slot(s: &str) -> Option<usize> {
    let digits = s.strip_prefix('P')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_registry(dir: &Path) -> Result<CharacterRegistry, DataError> {
    let path = dir.join(REGISTRY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let names: Vec<&str> = text.lines().map(str::trim).collect();
    let names = match names.iter().rposition(|n| !n.is_empty()) {
        Some(last) => &names[..=last],
        None => &[][..],
    };
    CharacterRegistry::new(names.iter().copied()).map_err(|reason| DataError::MalformedRecord {
        file: path.display().to_string(),
        line: 0,
        reason,
    })
}

struct Loader<'r> {
    registry: &'r CharacterRegistry,
    format: CorpusFormat,
    errors: Vec<DataError>,
    scenes: Vec<Scene>,
    summaries: BTreeMap<String, Summary>,
}

impl Loader<'_> {
    fn malformed(&mut self, file: &str, line: usize, reason: impl Into<String>) {
        self.errors.push(DataError::MalformedRecord {
            file: file.to_string(),
            line,
            reason: reason.into(),
        });
    }

    fn character(&mut self, file: &str, line: usize, name: &str) -> Option<CharacterId> {
        let id = self.registry.id(name);
        if id.is_none() {
            self.errors.push(DataError::UnknownCharacter {
                file: file.to_string(),
                line,
                name: name.to_string(),
            });
        }
        id
    }

    fn mentions(
        &mut self,
        file: &str,
        line: usize,
        records: &[MentionRecord],
        lengths: &[usize],
    ) -> Option<Vec<MentionSpan>> {
        let mut out = Vec::with_capacity(records.len());
        let mut ok = true;
        for (i, m) in records.iter().enumerate() {
            let Some(&len) = lengths.get(m.utt) else {
                self.malformed(file, line, format!("mention {i}: utterance {} out of range", m.utt));
                ok = false;
                continue;
            };
            if m.start > m.end || m.end >= len {
                self.malformed(
                    file,
                    line,
                    format!("mention {i}: span [{}, {}] out of bounds for length {len}", m.start, m.end),
                );
                ok = false;
                continue;
            }
            match self.character(file, line, &m.gold) {
                Some(gold) => out.push(MentionSpan {
                    mention_id: i,
                    utterance: m.utt,
                    start: m.start,
                    end: m.end,
                    gold,
                }),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn scene(&mut self, file: &str, line: usize, split: Split, rec: SceneRecord) {
        let before = self.errors.len();
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        if rec.utterances.is_empty() {
            self.malformed(file, line, "scene has no utterances");
        }
        for (index, u) in rec.utterances.iter().enumerate() {
            if u.tokens.is_empty() {
                self.malformed(file, line, format!("utterance {index} has no tokens"));
            }
            let speaker = match self.format {
                CorpusFormat::Guessing => match parse_slot(&u.speaker) {
                    Some(s) => SpeakerSlot::Anonymous(s),
                    None => {
                        self.malformed(file, line, format!("utterance {index}: speaker {:?} is not a slot P<n>", u.speaker));
                        continue;
                    }
                },
                CorpusFormat::LinkingCoref => match self.character(file, line, &u.speaker) {
                    Some(c) => SpeakerSlot::Known(c),
                    None => continue,
                },
            };
            utterances.push(Utterance {
                speaker,
                tokens: u.tokens.clone(),
                index,
            });
        }
        let lengths: Vec<usize> = rec.utterances.iter().map(|u| u.tokens.len()).collect();
        let mentions = self.mentions(file, line, &rec.mentions, &lengths);

        let mut speaker_labels = BTreeMap::new();
        for (slot, name) in &rec.speaker_labels {
            let Some(s) = parse_slot(slot) else {
                self.malformed(file, line, format!("speaker label key {slot:?} is not a slot P<n>"));
                continue;
            };
            if let Some(c) = self.character(file, line, name) {
                speaker_labels.insert(s, c);
            }
        }

        let mut scene = Scene {
            scene_id: rec.scene_id,
            split,
            utterances,
            mentions: mentions.unwrap_or_default(),
            speaker_labels,
            summary_ref: rec.summary_ref,
        };
        if split != Split::Test {
            for slot in scene.anonymous_slots() {
                if !scene.speaker_labels.contains_key(&slot) {
                    self.malformed(file, line, format!("slot P{slot} has no gold label in {} split", split.as_str()));
                }
            }
        }
        if self.errors.len() == before {
            scene.utterances.shrink_to_fit();
            self.scenes.push(scene);
        }
    }

    fn summary(&mut self, file: &str, line: usize, rec: SummaryRecord) {
        let before = self.errors.len();
        if let Some(m) = rec.mentions.iter().find(|m| m.utt != 0) {
            self.malformed(file, line, format!("summary mention has utt {} (must be 0)", m.utt));
        }
        let mentions = self.mentions(file, line, &rec.mentions, &[rec.tokens.len()]);
        if self.summaries.contains_key(&rec.summary_id) {
            self.malformed(file, line, format!("duplicate summary_id {:?}", rec.summary_id));
        }
        if self.errors.len() == before {
            let summary = Summary {
                summary_id: rec.summary_id.clone(),
                tokens: rec.tokens,
                mentions: mentions.unwrap_or_default(),
            };
            self.summaries.insert(rec.summary_id, summary);
        }
    }

    fn file(&mut self, path: &Path, split: Option<Split>) {
        let file = path.display().to_string();
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                self.errors.push(io_err(path, e));
                return;
            }
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let value: Value = match serde_json::from_str(raw) {
                Ok(v) => v,
                Err(e) => {
                    self.malformed(&file, line, format!("invalid JSON: {e}"));
                    continue;
                }
            };
            let is_scene = value.get("scene_id").is_some();
            let is_summary = value.get("summary_id").is_some();
            match (is_scene, is_summary, split) {
                (true, false, Some(split)) => match serde_json::from_value::<SceneRecord>(value) {
                    Ok(rec) => self.scene(&file, line, split, rec),
                    Err(e) => self.malformed(&file, line, format!("invalid scene record: {e}")),
                },
                (true, false, None) => self.malformed(&file, line, "scene record outside a split file"),
                (false, true, _) => match serde_json::from_value::<SummaryRecord>(value) {
                    Ok(rec) => self.summary(&file, line, rec),
                    Err(e) => self.malformed(&file, line, format!("invalid summary record: {e}")),
                },
                _ => self.malformed(&file, line, "record must have exactly one of scene_id or summary_id"),
            }
        }
    }
}

fn load_all(dir: &Path, format: CorpusFormat) -> (Option<Corpus>, Vec<DataError>) {
    let registry = match read_registry(dir) {
        Ok(r) => r,
        Err(e) => return (None, vec![e]),
    };
    let mut loader = Loader {
        registry: &registry,
        format,
        errors: Vec::new(),
        scenes: Vec::new(),
        summaries: BTreeMap::new(),
    };
    for (split, name) in SPLIT_FILES {
        let path = dir.join(name);
        if path.exists() {
            loader.file(&path, Some(split));
        }
    }
    let summary_path = dir.join(SUMMARY_FILE);
    if summary_path.exists() {
        loader.file(&summary_path, None);
    }

    let Loader {
        mut errors,
        mut scenes,
        summaries,
        ..
    } = loader;
    scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    for pair in scenes.windows(2) {
        if pair[0].scene_id == pair[1].scene_id {
            errors.push(DataError::MalformedRecord {
                file: dir.display().to_string(),
                line: 0,
                reason: format!("duplicate scene_id {:?}", pair[0].scene_id),
            });
        }
    }
    for scene in &scenes {
        if let Some(r) = &scene.summary_ref {
            if !summaries.contains_key(r) {
                errors.push(DataError::DanglingSummaryRef {
                    scene_id: scene.scene_id.clone(),
                    summary_ref: r.clone(),
                });
            }
        }
    }
    let corpus = Corpus {
        registry: registry.clone(),
        scenes,
        summaries,
    };
    (Some(corpus), errors)
}

/// Loads and validates a corpus directory. Returns the first diagnostic on
/// failure; use [`validate_corpus`] for the full list.
pub fn load_corpus(dir: &Path, format: CorpusFormat) -> Result<Corpus, DataError> {
    let (corpus, errors) = load_all(dir, format);
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(corpus.expect("corpus present when no errors")),
    }
}

/// Every diagnostic for a corpus directory; empty when the corpus is valid.
pub fn validate_corpus(dir: &Path, format: CorpusFormat) -> Vec<DataError> {
    load_all(dir, format).1
}

fn mention_records(corpus: &Corpus, mentions: &[MentionSpan]) -> Vec<MentionRecord> {
    mentions
        .iter()
        .map(|m| MentionRecord {
            utt: m.utterance,
            start: m.start,
            end: m.end,
            gold: corpus.registry.name(m.gold).unwrap_or_default().to_string(),
        })
        .collect()
}

fn scene_record(corpus: &Corpus, scene: &Scene) -> SceneRecord {
    let name = |c: CharacterId| corpus.registry.name(c).unwrap_or_default().to_string();
    SceneRecord {
        scene_id: scene.scene_id.clone(),
        utterances: scene
            .utterances
            .iter()
            .map(|u| UtteranceRecord {
                speaker: match u.speaker {
                    SpeakerSlot::Known(c) => name(c),
                    SpeakerSlot::Anonymous(s) => format!("P{s}"),
                },
                tokens: u.tokens.clone(),
            })
            .collect(),
        mentions: mention_records(corpus, &scene.mentions),
        speaker_labels: scene
            .speaker_labels
            .iter()
            .map(|(s, c)| (format!("P{s}"), name(*c)))
            .collect(),
        summary_ref: scene.summary_ref.clone(),
    }
}

/// Writes a corpus in the layout [`load_corpus`] reads.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let reg_path = dir.join(REGISTRY_FILE);
    let mut reg = String::new();
    for name in corpus.registry.names() {
        reg.push_str(name);
        reg.push('\n');
    }
    fs::write(&reg_path, reg).map_err(|e| io_err(&reg_path, e))?;

    for (split, file) in SPLIT_FILES {
        let path = dir.join(file);
        let mut out = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        for scene in corpus.split(split) {
            let line = serde_json::to_string(&scene_record(corpus, scene)).map_err(|e| io_err(&path, e))?;
            writeln!(out, "{line}").map_err(|e| io_err(&path, e))?;
        }
    }

    let path = dir.join(SUMMARY_FILE);
    let mut out = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    for summary in corpus.summaries.values() {
        let rec = SummaryRecord {
            summary_id: summary.summary_id.clone(),
            tokens: summary.tokens.clone(),
            mentions: mention_records(corpus, &summary.mentions),
        };
        let line = serde_json::to_string(&rec).map_err(|e| io_err(&path, e))?;
        writeln!(out, "{line}").map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}
