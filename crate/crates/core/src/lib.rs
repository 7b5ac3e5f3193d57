//! Multi-level contrastive learning of character embeddings from scripts.

pub mod autograd;
pub mod data;
pub mod encoding;
pub mod gradcheck;
pub mod metrics;
pub mod objectives;
pub mod overrides;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use data::{
    generate_synthetic_corpus, load_corpus, write_corpus, CharacterId, CharacterRegistry, Corpus, CorpusFormat, DataError,
    Scene, Split, Summary, SyntheticSpec,
};
pub use encoding::{CharacterEmbedding, EmbeddingSource, EncodingError};
pub use metrics::{ClassificationScores, Clustering, CorefScores, MetricError, Prf};
pub use objectives::{ContrastiveConfig, ObjectiveError};
pub use report::{ItemKey, ReportError};
pub use trainer::{Checkpoint, Model, Task, TaskRatios, TrainConfig, TrainError};
