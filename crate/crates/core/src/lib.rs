//! Accent identification with a speaker-uniformity adversary, a toy accent-conditioned
//! generator, and the synthetic factorized corpus both are trained on.

mod blob;
pub mod augment;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod genaid;
pub mod nn;
pub mod splits;
pub mod synthgen;

pub use augment::{augment_batch, perturb_noise, perturb_speed, AugmentConfig};
pub use blob::Dtype;
pub use corpus::{
    generate_corpus, load_factors, load_manifest, save_factors, save_manifest, Corpus, CorpusSpec, FactorTable,
    FrameMatrix, UtteranceRecord,
};
pub use error::{Error, Result};
pub use eval::{
    acc_cos, classification_report, cosine_similarity, evaluate_aid, scsc, silhouette, spk_cos, AidEvaluation,
    LabeledEmbedding, MetricsReport, ProbeConfig, ProbeInput, ProbeModel, ScscReport,
};
pub use genaid::{
    adversarial_uniformity_loss, aid_forward, extract_accent_embedding, predict_accent, total_loss, train_aid,
    AidConfig, AidModel, TrainingLog, ValidationSpeakers,
};
pub use nn::Parameters;
pub use splits::{build_splits, compute_sampling_weights, sample_batch, Part, SplitPolicy, SplitSet, WeightTable};
pub use synthgen::{
    predict_durations, synthesize, train_generator, GenConfig, GenModel, GenReport, Scenario, ScenarioConfig,
    ScenarioMode,
};
