//! Shared fixtures for the benchmarks.
use accentkit_core::{build_splits, generate_corpus, AidConfig, AidModel, Corpus, CorpusSpec, SplitPolicy, SplitSet};

/// Desk-sized corpus and its default split.
pub fn desk_fixture(seed: u64) -> (Corpus, SplitSet) {
    let spec = CorpusSpec {
        seed,
        ..CorpusSpec::default()
    };
    let (records, _) = generate_corpus(&spec).expect("default corpus spec is valid");
    let corpus = Corpus::new(records).expect("generated ids are unique");
    let split = build_splits(
        &corpus,
        &SplitPolicy {
            seed,
            ..SplitPolicy::default()
        },
    )
    .expect("default corpus splits");
    (corpus, split)
}

/// Untrained identifier sized for the fixture.
pub fn desk_model(corpus: &Corpus, split: &SplitSet) -> AidModel {
    let speakers = split.train_speakers(corpus).expect("split ids resolve");
    let config = AidConfig::default()
        .resolve(corpus.dim(), split.eligible_accents.len(), speakers.len())
        .expect("default config resolves");
    AidModel::new(config, split.eligible_accents.clone(), speakers).expect("model builds")
}
