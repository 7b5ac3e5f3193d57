//! Deterministic synthetic script corpora with ground-truth labels.
//!
//! Every character owns a Zipf-shaped distribution over a shared content
//! vocabulary (each character ranks the words in its own random order), so
//! identity is recoverable from word choice with difficulty controlled by
//! `vocab_skew`. Each scene gets a summary built from one template sentence
//! per represented character: `<name> <verb> <trait words...> .`

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    CharacterId, CharacterRegistry, Corpus, CorpusFormat, DataError, MentionSpan, Scene, SpeakerSlot,
    Split, Summary, Utterance,
};

const NAMES: [&str; 12] = [
    "Ross", "Monica", "Joey", "Rachel", "Chandler", "Phoebe", "Penny", "Sheldon", "Leonard", "Amy",
    "Howard", "Raj",
];

const VERBS: [&str; 6] = ["talks", "argues", "jokes", "worries", "laughs", "complains"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_characters: usize,
    pub n_scenes: usize,
    pub utterances_per_scene: usize,
    /// Zipf exponent of every character's word distribution; 0 makes all
    /// characters indistinguishable.
    pub vocab_skew: f64,
    pub vocab_size: usize,
    pub tokens_per_utterance: usize,
    pub max_speakers_per_scene: usize,
    /// Probability that an utterance carries a character mention.
    pub mention_rate: f64,
    /// Trait words per summary sentence.
    pub summary_traits: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub format: CorpusFormat,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_characters: 4,
            n_scenes: 200,
            utterances_per_scene: 6,
            vocab_skew: 1.0,
            vocab_size: 60,
            tokens_per_utterance: 6,
            max_speakers_per_scene: 3,
            mention_rate: 0.5,
            summary_traits: 3,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            format: CorpusFormat::Guessing,
        }
    }
}

impl SyntheticSpec {
    /// Sets one field by name, for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DataError> {
        *self = crate::overrides::apply_override(self, key, value).map_err(DataError::InvalidSpec)?;
        Ok(())
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.n_characters < 2 {
            return bad("n_characters must be at least 2");
        }
        if self.n_scenes == 0 {
            return bad("n_scenes must be positive");
        }
        if self.utterances_per_scene == 0 || self.tokens_per_utterance == 0 {
            return bad("utterances_per_scene and tokens_per_utterance must be positive");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if !(self.vocab_skew.is_finite() && self.vocab_skew >= 0.0) {
            return bad("vocab_skew must be finite and non-negative");
        }
        if self.max_speakers_per_scene < 1 {
            return bad("max_speakers_per_scene must be positive");
        }
        if !(0.0..=1.0).contains(&self.mention_rate) {
            return bad("mention_rate must be in [0, 1]");
        }
        let held_out = self.dev_fraction + self.test_fraction;
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || held_out >= 1.0 {
            return bad("dev_fraction and test_fraction must be non-negative and sum below 1");
        }
        Ok(())
    }

    fn name(k: usize) -> String {
        NAMES.get(k).map_or_else(|| format!("Char{k}"), |n| n.to_string())
    }
}

struct Voice {
    words: WeightedIndex<f64>,
    order: Vec<usize>,
}

fn word(k: usize) -> String {
    format!("w{k}")
}

/// Generates a corpus; equal `spec` and `seed` give an identical corpus.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..spec.n_characters).map(SyntheticSpec::name).collect();
    let tokens_of: Vec<String> = names.iter().map(|n| n.to_lowercase()).collect();
    let registry = CharacterRegistry::new(names.clone()).map_err(DataError::InvalidSpec)?;

    let voices: Vec<Voice> = (0..spec.n_characters)
        .map(|_| {
            let mut order: Vec<usize> = (0..spec.vocab_size).collect();
            order.shuffle(&mut rng);
            let mut weights = vec![0.0; spec.vocab_size];
            for (rank, &w) in order.iter().enumerate() {
                weights[w] = 1.0 / ((rank + 1) as f64).powf(spec.vocab_skew);
            }
            Voice {
                words: WeightedIndex::new(&weights).expect("positive weights"),
                order,
            }
        })
        .collect();

    let n_test = (spec.n_scenes as f64 * spec.test_fraction).round() as usize;
    let n_dev = (spec.n_scenes as f64 * spec.dev_fraction).round() as usize;
    let n_train = spec.n_scenes.saturating_sub(n_test + n_dev);

    let mut scenes = Vec::with_capacity(spec.n_scenes);
    let mut summaries = BTreeMap::new();
    let width = spec.n_scenes.to_string().len().max(4);

    for s in 0..spec.n_scenes {
        let split = if s < n_train {
            Split::Train
        } else if s < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let max_k = spec
            .max_speakers_per_scene
            .min(spec.n_characters)
            .min(spec.utterances_per_scene)
            .max(1);
        let k = if max_k >= 2 { rng.random_range(2..=max_k) } else { 1 };
        let mut cast: Vec<usize> = (0..spec.n_characters).collect();
        cast.shuffle(&mut rng);
        cast.truncate(k);

        let mut speakers = cast.clone();
        while speakers.len() < spec.utterances_per_scene {
            let prev = *speakers.last().expect("non-empty");
            let choices: Vec<usize> = cast.iter().copied().filter(|&c| c != prev || k == 1).collect();
            speakers.push(*choices.choose(&mut rng).expect("non-empty cast"));
        }

        let mut utterances = Vec::with_capacity(speakers.len());
        let mut mentions = Vec::new();
        for (index, &speaker) in speakers.iter().enumerate() {
            let mut tokens: Vec<String> = (0..spec.tokens_per_utterance)
                .map(|_| word(voices[speaker].words.sample(&mut rng)))
                .collect();
            if rng.random_bool(spec.mention_rate) {
                let others: Vec<usize> = cast.iter().copied().filter(|&c| c != speaker).collect();
                let prev = index.checked_sub(1).map(|i| speakers[i]);
                let (token, gold) = match rng.random_range(0..3) {
                    1 if prev.is_some_and(|p| p != speaker) => ("you".to_string(), prev.expect("checked")),
                    2 if !others.is_empty() => {
                        let c = *others.choose(&mut rng).expect("non-empty");
                        (tokens_of[c].clone(), c)
                    }
                    _ => ("i".to_string(), speaker),
                };
                let at = rng.random_range(0..=tokens.len());
                tokens.insert(at, token);
                mentions.push(MentionSpan {
                    mention_id: mentions.len(),
                    utterance: index,
                    start: at,
                    end: at,
                    gold: CharacterId(gold),
                });
            }
            utterances.push(Utterance {
                speaker: SpeakerSlot::Known(CharacterId(speaker)),
                tokens,
                index,
            });
        }

        let represented: BTreeSet<usize> = match spec.format {
            CorpusFormat::Guessing => cast.iter().copied().collect(),
            CorpusFormat::LinkingCoref => mentions.iter().map(|m| m.gold.0).collect(),
        };
        let summary_id = format!("summary_{s:0width$}");
        let mut tokens = Vec::new();
        let mut sum_mentions = Vec::new();
        let mut sentence_order: Vec<usize> = represented.into_iter().collect();
        sentence_order.shuffle(&mut rng);
        for c in sentence_order {
            sum_mentions.push(MentionSpan {
                mention_id: sum_mentions.len(),
                utterance: 0,
                start: tokens.len(),
                end: tokens.len(),
                gold: CharacterId(c),
            });
            tokens.push(tokens_of[c].clone());
            tokens.push(VERBS.choose(&mut rng).expect("non-empty").to_string());
            let top = spec.summary_traits.min(spec.vocab_size);
            for _ in 0..spec.summary_traits {
                // trait words come from the head of the character's ranking
                let rank = rng.random_range(0..top.max(1));
                tokens.push(word(voices[c].order[rank]));
            }
            tokens.push(".".to_string());
        }
        summaries.insert(
            summary_id.clone(),
            Summary {
                summary_id: summary_id.clone(),
                tokens,
                mentions: sum_mentions,
            },
        );

        let scene = Scene {
            scene_id: format!("scene_{s:0width$}"),
            split,
            utterances,
            mentions,
            speaker_labels: BTreeMap::new(),
            summary_ref: Some(summary_id),
        };
        scenes.push(match spec.format {
            CorpusFormat::Guessing => scene.masked_for_guessing(),
            CorpusFormat::LinkingCoref => scene,
        });
    }

    Ok(Corpus {
        registry,
        scenes,
        summaries,
    })
}
