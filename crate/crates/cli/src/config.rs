use std::fmt;
use std::path::Path;

use accentkit_core::corpus::accent_name;
use accentkit_core::synthgen::ScenarioConfig;
use accentkit_core::{AidConfig, AugmentConfig, CorpusSpec, GenConfig, ProbeConfig, SplitPolicy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Options for generation scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub scenarios: ScenarioConfig,
    /// Also train and score a generator fed zero accent embeddings.
    pub zero_accent_ablation: bool,
    /// Added to the AID seed for the independently trained second scorer.
    pub scorer_seed_offset: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scenarios: ScenarioConfig::default(),
            zero_accent_ablation: true,
            scorer_seed_offset: 1000,
        }
    }
}

/// Every section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub corpus: CorpusSpec,
    pub split: SplitPolicy,
    pub augment: AugmentConfig,
    pub aid: AidConfig,
    pub probe: ProbeConfig,
    pub gen: GenConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aid = AidConfig::default();
        let probe = ProbeConfig::default();
        Self {
            seed: None,
            corpus: CorpusSpec::default(),
            split: SplitPolicy::default(),
            augment: AugmentConfig::default(),
            gen: GenConfig {
                accent_embed_dim: aid.accent_embed_dim(),
                speaker_embed_dim: probe.probe_dim,
                held_out_accents: vec![accent_name(CorpusSpec::default().n_accents - 1)],
                ..GenConfig::default()
            },
            aid,
            probe,
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Small synthetic corpus and models that train in seconds.
    Desk,
    /// Full-scale hyperparameters: 13 accents, 64-dimensional bottleneck, alpha 10, learning rate 1e-4.
    PaperReference,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::default(),
            Profile::PaperReference => {
                let aid = AidConfig::paper_reference();
                let corpus = CorpusSpec {
                    n_accents: 13,
                    speakers_per_accent: 40,
                    utts_per_speaker: 60,
                    ..CorpusSpec::default()
                };
                let base = Self::default();
                Self {
                    gen: GenConfig {
                        accent_embed_dim: aid.accent_embed_dim(),
                        held_out_accents: vec![accent_name(corpus.n_accents - 1)],
                        ..base.gen
                    },
                    corpus,
                    split: SplitPolicy::paper_reference(),
                    aid,
                    ..base
                }
            }
        }
    }

    /// Propagates the global seed into every section.
    pub fn apply_global_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.corpus.seed = seed;
            self.split.seed = seed;
            self.augment.seed = seed;
            self.aid.seed = seed;
            self.probe.seed = seed;
            self.gen.seed = seed;
            self.eval.scenarios.seed = seed;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// All violations, each naming `section.field`.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut check = |r: accentkit_core::Result<()>| {
            if let Err(e) = r {
                out.push(Violation::from_core(e));
            }
        };
        check(self.corpus.validate());
        check(self.split.validate());
        check(self.augment.validate());
        check(self.aid.validate());
        check(self.probe.validate());
        check(self.gen.validate());

        let s = &self.eval.scenarios;
        if s.min_tokens == 0 || s.max_tokens < s.min_tokens {
            out.push(Violation::new("eval.scenarios.min_tokens", "need 1 <= min_tokens <= max_tokens"));
        }
        if self.gen.accent_embed_dim != self.aid.accent_embed_dim() {
            out.push(Violation::new(
                "gen.accent_embed_dim",
                format!(
                    "must equal the accent embedding width of the aid section ({}), got {}",
                    self.aid.accent_embed_dim(),
                    self.gen.accent_embed_dim
                ),
            ));
        }
        if self.gen.speaker_embed_dim != self.probe.probe_dim {
            out.push(Violation::new(
                "gen.speaker_embed_dim",
                format!(
                    "must equal probe.probe_dim ({}), got {}",
                    self.probe.probe_dim, self.gen.speaker_embed_dim
                ),
            ));
        }
        if self.aid.n_accents != 0 && self.aid.n_accents != self.corpus.n_accents {
            out.push(Violation::new(
                "aid.n_accents",
                format!("corpus has {} accents, got {}", self.corpus.n_accents, self.aid.n_accents),
            ));
        }
        if self.aid.input_dim != 0 && self.aid.input_dim != self.corpus.feature_dim {
            out.push(Violation::new(
                "aid.input_dim",
                format!("corpus frames have {} values, got {}", self.corpus.feature_dim, self.aid.input_dim),
            ));
        }
        if self.gen.token_vocab != 0 && self.gen.token_vocab < self.corpus.content_vocab {
            out.push(Violation::new(
                "gen.token_vocab",
                format!("smaller than corpus.content_vocab ({})", self.corpus.content_vocab),
            ));
        }
        let known: Vec<String> = (0..self.corpus.n_accents).map(accent_name).collect();
        for held in &self.gen.held_out_accents {
            if !known.contains(held) {
                out.push(Violation::new(
                    "gen.held_out_accents",
                    format!("{held} is not an accent of the corpus"),
                ));
            }
        }
        if !known.is_empty() && known.iter().all(|a| self.gen.held_out_accents.contains(a)) {
            out.push(Violation::new("gen.held_out_accents", "cannot hold out every accent"));
        }
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Invalid(v))
        }
    }
}

/// One broken constraint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            constraint: constraint.into(),
        }
    }

    fn from_core(e: accentkit_core::Error) -> Self {
        match e {
            accentkit_core::Error::Validation { field, reason } => Self::new(field, reason),
            other => Self::new("config", other.to_string()),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

/// Where a configuration comes from.
#[derive(Clone, Debug, Default)]
pub struct ConfigSource<'a> {
    pub profile: Option<Profile>,
    pub file: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
}

/// Profile defaults, then the file, then `--set` overrides, then `--seed`.
pub fn load_config(source: &ConfigSource<'_>) -> CliResult<RunConfig> {
    let base = RunConfig::profile(source.profile.unwrap_or(Profile::Desk));
    let mut table: toml::Table = toml::from_str(&base.to_toml()).expect("profile round-trips through TOML");
    if let Some(path) = source.file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let file: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        merge(&mut table, file);
    }
    for item in source.overrides {
        apply_override(&mut table, item)?;
    }
    let mut config: RunConfig = RunConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| CliError::Config(e.message().to_string()))?;
    if source.seed.is_some() {
        config.seed = source.seed;
    }
    config.apply_global_seed();
    Ok(config)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Applies `section.key=value`; the value is read as a TOML literal, or as a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {item}: expected section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("--set {item}: key must look like section.key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let (last, parents) = keys.split_last().expect("at least two keys");
    let mut cursor = table;
    for key in parents {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {item}: {key} is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Reads a config file and lists its violations. Unreadable files are an error; anything
/// else wrong with the file is reported as a violation.
pub fn validate_config(path: &Path) -> CliResult<Vec<Violation>> {
    std::fs::metadata(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let source = ConfigSource {
        file: Some(path),
        ..ConfigSource::default()
    };
    match load_config(&source) {
        Ok(config) => Ok(config.violations()),
        Err(CliError::Config(msg)) => Ok(vec![Violation::new("config", msg)]),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        assert_eq!(RunConfig::profile(Profile::Desk).violations(), vec![]);
        assert_eq!(RunConfig::profile(Profile::PaperReference).violations(), vec![]);
    }

    #[test]
    fn paper_reference_values() {
        let c = RunConfig::profile(Profile::PaperReference);
        assert_eq!(c.aid.bottleneck_dim, 64);
        assert_eq!(c.aid.alpha, 10.0);
        assert_eq!(c.aid.learning_rate, 1e-4);
        assert_eq!(c.gen.accent_embed_dim, 64);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_are_typed() {
        let source = ConfigSource {
            overrides: &["aid.alpha=0".into(), "gen.held_out_accents=[\"acc01\"]".into(), "aid.validate_on=seen".into()],
            ..ConfigSource::default()
        };
        let c = load_config(&source).unwrap();
        assert_eq!(c.aid.alpha, 0.0);
        assert_eq!(c.gen.held_out_accents, vec!["acc01".to_string()]);
        assert_eq!(c.aid.validate_on, accentkit_core::ValidationSpeakers::Seen);
    }

    #[test]
    fn unknown_override_key_is_a_config_error() {
        let source = ConfigSource {
            overrides: &["aid.bottleneck=3".into()],
            ..ConfigSource::default()
        };
        let err = load_config(&source).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bottleneck"), "{err}");
        let source = ConfigSource {
            overrides: &["alpha=3".into()],
            ..ConfigSource::default()
        };
        assert!(matches!(load_config(&source), Err(CliError::Config(_))));
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let source = ConfigSource {
            seed: Some(42),
            ..ConfigSource::default()
        };
        let c = load_config(&source).unwrap();
        for s in [c.corpus.seed, c.split.seed, c.augment.seed, c.aid.seed, c.probe.seed, c.gen.seed, c.eval.scenarios.seed] {
            assert_eq!(s, 42);
        }
    }

    #[test]
    fn bottleneck_must_reduce_dimension() {
        let mut c = RunConfig::default();
        c.aid.bottleneck_dim = c.aid.embed_dim;
        c.gen.accent_embed_dim = c.aid.embed_dim;
        let v = c.violations();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "aid.bottleneck_dim");
        assert!(v[0].constraint.contains("bottleneck must reduce dimension"));
    }

    #[test]
    fn cross_section_embedding_width() {
        let mut c = RunConfig::default();
        c.gen.accent_embed_dim += 1;
        let v = c.violations();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "gen.accent_embed_dim");
    }

    #[test]
    fn held_out_accents_must_exist() {
        let mut c = RunConfig::default();
        c.gen.held_out_accents = vec!["acc99".into()];
        assert_eq!(c.violations()[0].field, "gen.held_out_accents");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.aid.alpha = 1.0;
        assert_ne!(a.hash(), b.hash());
    }
}
