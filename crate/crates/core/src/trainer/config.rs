//! Declarative training configuration (TOML), with dotted-key overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::CorpusFormat;
use crate::encoding::{EncoderConfig, MlsaConfig};
use crate::objectives::ContrastiveConfig;
use crate::overrides::apply_override;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Linking,
    Coref,
    Guessing,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linking => "linking",
            Self::Coref => "coref",
            Self::Guessing => "guessing",
        }
    }

    pub fn corpus_format(self) -> CorpusFormat {
        match self {
            Self::Linking | Self::Coref => CorpusFormat::LinkingCoref,
            Self::Guessing => CorpusFormat::Guessing,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linking" => Ok(Self::Linking),
            "coref" | "coreference" => Ok(Self::Coref),
            "guessing" => Ok(Self::Guessing),
            other => Err(format!("unknown task {other:?} (expected linking, coref or guessing)")),
        }
    }
}

/// Weights of the supervised, summary-conversation and cross-sample losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRatios {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TaskRatios {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl TaskRatios {
    pub const SUPERVISED_ONLY: TaskRatios = TaskRatios {
        lambda: 1.0,
        alpha: 0.0,
        beta: 0.0,
    };

    pub fn new(lambda: f64, alpha: f64, beta: f64) -> Self {
        Self { lambda, alpha, beta }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.lambda, self.alpha, self.beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "task ratios must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(TrainError::NoActiveLoss);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub learning_rate: f64,
    /// Scenes per batch.
    pub batch_size: usize,
    pub epochs: usize,
}

impl StageConfig {
    fn validate(&self, name: &str) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "{name}: learning_rate, batch_size and epochs must be positive"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_length: usize,
    pub mlsa_blocks: usize,
    pub mlsa_heads: usize,
    pub mlsa_ff: usize,
    /// Conversation and summary sides use one MLSA stack.
    pub share_mlsa: bool,
    pub head_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let mlsa = MlsaConfig::default();
        Self {
            hidden: enc.hidden,
            heads: enc.heads,
            ff: enc.ff,
            max_length: enc.max_length,
            mlsa_blocks: mlsa.blocks,
            mlsa_heads: mlsa.heads,
            mlsa_ff: mlsa.ff,
            share_mlsa: true,
            head_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            heads: self.heads,
            ff: self.ff,
            max_length: self.max_length,
        }
    }

    pub fn mlsa(&self) -> MlsaConfig {
        MlsaConfig {
            blocks: self.mlsa_blocks,
            heads: self.mlsa_heads,
            ff: self.mlsa_ff,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(format!("model: {m}")));
        if self.hidden == 0 || self.ff == 0 || self.mlsa_ff == 0 || self.max_length == 0 {
            return bad("sizes must be positive");
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden must be divisible by heads");
        }
        if self.mlsa_heads == 0 || self.hidden % self.mlsa_heads != 0 {
            return bad("hidden must be divisible by mlsa_heads");
        }
        if self.mlsa_blocks == 0 {
            return bad("mlsa_blocks must be at least 1");
        }
        Ok(())
    }
}

/// Everything needed to run [`train`](super::train).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Corpus directory; the CLI falls back to its data-root variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ratios: TaskRatios,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl TrainConfig {
    /// Learning rates, batch sizes and epochs of the reference setup. For
    /// linking and coreference one batch is one scene.
    pub fn preset(task: Task) -> Self {
        let (stage1, stage2) = match task {
            Task::Linking | Task::Coref => (
                StageConfig {
                    learning_rate: 1e-5,
                    batch_size: 1,
                    epochs: 30,
                },
                StageConfig {
                    learning_rate: 2e-5,
                    batch_size: 1,
                    epochs: 100,
                },
            ),
            Task::Guessing => (
                StageConfig {
                    learning_rate: 4e-6,
                    batch_size: 4,
                    epochs: 20,
                },
                StageConfig {
                    learning_rate: 2e-5,
                    batch_size: 2,
                    epochs: 40,
                },
            ),
        };
        Self {
            task,
            seed: 0,
            data: None,
            model: ModelConfig::default(),
            ratios: TaskRatios::default(),
            contrastive: ContrastiveConfig::default(),
            optimizer: AdamConfig::default(),
            stage1,
            stage2,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.ratios.validate()?;
        self.contrastive
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.model.validate()?;
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(TrainError::InvalidConfig("optimizer: betas in [0, 1), eps > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets a dotted key such as `stage1.learning_rate`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        *self = apply_override(self, key, value).map_err(|e| TrainError::InvalidConfig(format!("--{key} {value}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_hold_reference_values() {
        let l = TrainConfig::preset(Task::Linking);
        assert_eq!((l.stage1.learning_rate, l.stage1.epochs), (1e-5, 30));
        assert_eq!((l.stage2.learning_rate, l.stage2.epochs), (2e-5, 100));
        let g = TrainConfig::preset(Task::Guessing);
        assert_eq!((g.stage1.learning_rate, g.stage1.batch_size, g.stage1.epochs), (4e-6, 4, 20));
        assert_eq!((g.stage2.learning_rate, g.stage2.batch_size, g.stage2.epochs), (2e-5, 2, 40));
        assert_eq!(g.ratios, TaskRatios::new(1.0, 0.5, 0.5));
        g.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let mut cfg = TrainConfig::preset(Task::Guessing);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);

        cfg.set("stage1.learning_rate", "0.001").unwrap();
        cfg.set("ratios.beta", "1").unwrap();
        cfg.set("stage2.epochs", "7").unwrap();
        assert!(cfg.set("stage2.epochs", "7.5").is_err());
        cfg.set("model.share_mlsa", "false").unwrap();
        cfg.set("task", "linking").unwrap();
        cfg.set("data", "/tmp/corpus").unwrap();
        assert_eq!(cfg.stage1.learning_rate, 0.001);
        assert_eq!(cfg.ratios.beta, 1.0);
        assert!(!cfg.model.share_mlsa);
        assert_eq!(cfg.task, Task::Linking);
        assert_eq!(cfg.data.as_deref(), Some("/tmp/corpus"));
        assert!(cfg.set("stage1.nonsense", "3").is_err());
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let text = r#"
            task = "guessing"
            [stage1]
            learning_rate = 4e-6
            batch_size = 4
            epochs = 20
            [stage2]
            learning_rate = 2e-5
            batch_size = 2
            epochs = 40
        "#;
        let cfg = TrainConfig::from_toml(text).unwrap();
        assert_eq!(cfg, TrainConfig::preset(Task::Guessing));
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::preset(Task::Coref);
        cfg.ratios = TaskRatios::new(0.0, 0.0, 0.0);
        assert_eq!(cfg.validate(), Err(TrainError::NoActiveLoss));
        cfg.ratios = TaskRatios::new(1.0, -0.5, 0.0);
        assert!(cfg.validate().is_err());
        cfg.ratios = TaskRatios::default();
        cfg.model.heads = 5;
        assert!(cfg.validate().is_err());
    }
}
