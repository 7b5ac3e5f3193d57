//! Fixtures shared by the benchmarks in `benches/`.

use charcl_core::metrics::Clustering;
use charcl_core::trainer::{Model, TrainConfig};
use charcl_core::{generate_synthetic_corpus, Corpus, SyntheticSpec, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gold and predicted clusterings of `n` mentions, each drawn by assigning
/// mentions to one of `k` clusters uniformly.
pub fn random_pair(n: usize, k: usize, seed: u64) -> (Clustering, Clustering) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        Clustering::from_labels(&labels)
    };
    (draw(), draw())
}

pub fn guessing_corpus(seed: u64) -> Corpus {
    generate_synthetic_corpus(&SyntheticSpec::default(), seed).expect("valid default spec")
}

pub fn guessing_model(corpus: &Corpus) -> (TrainConfig, Model) {
    let cfg = TrainConfig::preset(Task::Guessing);
    let model = Model::new(Task::Guessing, &cfg.model, corpus, &mut ChaCha8Rng::seed_from_u64(0));
    (cfg, model)
}
