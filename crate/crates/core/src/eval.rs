//! Objective metrics: macro classification reports, seen/unseen gaps, speaker-cluster
//! silhouettes, cosine similarities, a diagnostic speaker probe and embedding export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::checkpoint;
use crate::corpus::{Corpus, UtteranceRecord};
use crate::error::{Error, Result};
use crate::genaid::{extract_accent_embedding, predict_accent, AidModel};
use crate::nn::{self, Adam, Linear, Parameters, TensorRef};
use crate::splits::SplitSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-accent and macro-averaged scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_accent: BTreeMap<String, ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub n_examples: usize,
    /// Accents with no true examples; left out of the macro means.
    pub absent_accents: Vec<String>,
}

/// Builds a report from class-index predictions. Indices refer to `accents`.
pub fn classification_report(predictions: &[usize], truths: &[usize], accents: &[String]) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("predictions vs truths", truths.len(), predictions.len()));
    }
    if truths.is_empty() {
        return Err(Error::validation("truths", "no examples to score"));
    }
    let k = accents.len();
    if let Some(bad) = predictions.iter().chain(truths).find(|&&c| c >= k) {
        return Err(Error::validation("labels", format!("class index {bad} outside {k} accents")));
    }
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut actual = vec![0usize; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let mut per_accent = BTreeMap::new();
    let mut absent_accents = Vec::new();
    let (mut sp, mut sr, mut sf, mut n_present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..k {
        let precision = if predicted[c] > 0 {
            tp[c] as f64 / predicted[c] as f64
        } else {
            0.0
        };
        let recall = if actual[c] > 0 { tp[c] as f64 / actual[c] as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if actual[c] == 0 {
            absent_accents.push(accents[c].clone());
        } else {
            sp += precision;
            sr += recall;
            sf += f1;
            n_present += 1;
        }
        per_accent.insert(
            accents[c].clone(),
            ClassScores {
                precision,
                recall,
                f1,
                support: actual[c],
            },
        );
    }
    let n = n_present as f64;
    Ok(MetricsReport {
        per_accent,
        macro_precision: sp / n,
        macro_recall: sr / n,
        macro_f1: sf / n,
        accuracy: tp.iter().sum::<usize>() as f64 / truths.len() as f64,
        n_examples: truths.len(),
        absent_accents,
    })
}

/// Same as [`classification_report`] but with string labels.
pub fn classification_report_labels<S: AsRef<str>>(
    predictions: &[S],
    truths: &[S],
    accents: &[String],
) -> Result<MetricsReport> {
    let index: HashMap<&str, usize> = accents.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let lookup = |labels: &[S]| -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                index.get(l.as_ref()).copied().ok_or_else(|| Error::Unknown {
                    kind: "accent",
                    id: l.as_ref().to_string(),
                })
            })
            .collect()
    };
    classification_report(&lookup(predictions)?, &lookup(truths)?, accents)
}

/// Seen-minus-unseen differences; positive means worse on unseen speakers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub f1_gap: f64,
    pub acc_gap: f64,
}

pub fn generalisation_gap(seen: &MetricsReport, unseen: &MetricsReport) -> GapReport {
    GapReport {
        f1_gap: seen.macro_f1 - unseen.macro_f1,
        acc_gap: seen.accuracy - unseen.accuracy,
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance.
///
/// Points in singleton clusters score 0, as do points with `max(a, b) = 0`.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette labels", points.len(), labels.len()));
    }
    if points.len() < 3 {
        return Err(Error::validation("points", "silhouette needs at least 3 points"));
    }
    let mut cluster_of = Vec::with_capacity(labels.len());
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        cluster_of.push(*ids.entry(l).or_insert(next));
    }
    let k = ids.len();
    if k < 2 {
        return Err(Error::validation("cluster_labels", "silhouette needs at least 2 clusters"));
    }
    let mut sizes = vec![0usize; k];
    for &c in &cluster_of {
        sizes[c] += 1;
    }
    let n = points.len();
    let mut sums = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        let ci = cluster_of[i];
        if sizes[ci] == 1 {
            continue;
        }
        sums.fill(0.0);
        for j in 0..n {
            if i != j {
                sums[cluster_of[j]] += euclidean(&points[i], &points[j]);
            }
        }
        let a = sums[ci] / (sizes[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// An embedding with its utterance, speaker and accent labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub utt_id: String,
    pub speaker_id: String,
    pub accent_label: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedAccent {
    pub accent: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScscReport {
    pub per_accent_silhouette: BTreeMap<String, f64>,
    pub scsc: f64,
    pub skipped_accents: Vec<SkippedAccent>,
}

/// Silhouette of speaker clusters within each accent, averaged over accents.
///
/// Only speakers with at least two utterances take part, and an accent needs at least two
/// such speakers.
pub fn scsc(embeddings: &[LabeledEmbedding]) -> Result<ScscReport> {
    let mut by_accent: BTreeMap<&str, BTreeMap<&str, Vec<&[f64]>>> = BTreeMap::new();
    for e in embeddings {
        by_accent
            .entry(&e.accent_label)
            .or_default()
            .entry(&e.speaker_id)
            .or_default()
            .push(&e.vector);
    }
    let mut per_accent_silhouette = BTreeMap::new();
    let mut skipped_accents = Vec::new();
    for (accent, speakers) in by_accent {
        let eligible: Vec<_> = speakers.iter().filter(|(_, v)| v.len() >= 2).collect();
        if eligible.len() < 2 {
            skipped_accents.push(SkippedAccent {
                accent: accent.to_string(),
                reason: format!(
                    "{} speakers with >= 2 utterances, need 2",
                    eligible.len()
                ),
            });
            continue;
        }
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (i, (_, vectors)) in eligible.iter().enumerate() {
            for v in vectors.iter() {
                points.push(v.to_vec());
                labels.push(i);
            }
        }
        per_accent_silhouette.insert(accent.to_string(), silhouette(&points, &labels)?);
    }
    if per_accent_silhouette.is_empty() {
        return Err(Error::validation(
            "embeddings",
            "every accent was skipped; SCSC is undefined",
        ));
    }
    let scsc = per_accent_silhouette.values().sum::<f64>() / per_accent_silhouette.len() as f64;
    Ok(ScscReport {
        per_accent_silhouette,
        scsc,
        skipped_accents,
    })
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine operand", u.len(), v.len()));
    }
    let nu = nn::dot(u, u).sqrt();
    let nv = nn::dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::validation("cosine operand", "zero vector"));
    }
    Ok((nn::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the accent embeddings of two utterances.
pub fn acc_cos(aid: &AidModel, generated: &UtteranceRecord, reference: &UtteranceRecord) -> Result<f64> {
    cosine_similarity(
        &extract_accent_embedding(aid, generated)?,
        &extract_accent_embedding(aid, reference)?,
    )
}

/// Embeds utterances with a model and attaches their labels.
pub fn embed_utterances(model: &AidModel, corpus: &Corpus, ids: &[String]) -> Result<Vec<LabeledEmbedding>> {
    ids.iter()
        .map(|id| {
            let utt = corpus.get(id)?;
            Ok(LabeledEmbedding {
                utt_id: utt.utt_id.clone(),
                speaker_id: utt.speaker_id.clone(),
                accent_label: utt.accent_label.clone(),
                vector: extract_accent_embedding(model, utt)?,
            })
        })
        .collect()
}

/// Accent classification report of a model over a set of utterances.
pub fn evaluate_accuracy(model: &AidModel, corpus: &Corpus, ids: &[String]) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(ids.len());
    let mut truths = Vec::with_capacity(ids.len());
    for id in ids {
        let utt = corpus.get(id)?;
        preds.push(predict_accent(model, utt)?);
        truths.push(
            model
                .accents
                .iter()
                .position(|a| *a == utt.accent_label)
                .ok_or_else(|| Error::Unknown {
                    kind: "accent",
                    id: utt.accent_label.clone(),
                })?,
        );
    }
    classification_report(&preds, &truths, &model.accents)
}

/// Inputs a speaker probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInput {
    /// Caller-supplied feature vectors, e.g. frozen accent embeddings.
    Features,
    /// Per-utterance mean frame.
    PooledFrames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Width of the speaker representation ahead of the classifier.
    pub probe_dim: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probe_dim: 16,
            learning_rate: 0.01,
            steps: 400,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_dim == 0 {
            return Err(Error::validation("probe.probe_dim", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("probe.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Linear speaker classifier over standardised features.
///
/// The `projection` output is the speaker representation used for speaker similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    pub input: ProbeInput,
    pub speakers: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub projection: Linear,
    pub classifier: Linear,
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    config: ProbeConfig,
    input: ProbeInput,
    speakers: Vec<String>,
    feature_dim: usize,
}

impl Parameters for ProbeModel {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            TensorRef {
                name: "feature_mean".into(),
                shape: vec![self.feature_mean.len()],
                data: &self.feature_mean,
            },
            TensorRef {
                name: "feature_scale".into(),
                shape: vec![self.feature_scale.len()],
                data: &self.feature_scale,
            },
        ];
        out.extend(self.projection.tensors("projection"));
        out.extend(self.classifier.tensors("classifier"));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.feature_mean, &mut self.feature_scale];
        out.extend(self.projection.tensors_mut());
        out.extend(self.classifier.tensors_mut());
        out
    }
}

/// Trainable part of a probe, so standardisation stats stay out of the optimizer.
struct ProbeParams<'a> {
    projection: &'a mut Linear,
    classifier: &'a mut Linear,
}

struct ProbeGrads {
    projection: Linear,
    classifier: Linear,
}

impl Parameters for ProbeParams<'_> {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.projection.tensors("projection");
        out.extend(self.classifier.tensors("classifier"));
        out
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.projection.tensors_mut();
        out.extend(self.classifier.tensors_mut());
        out
    }
}

impl Parameters for ProbeGrads {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.projection.tensors("projection");
        out.extend(self.classifier.tensors("classifier"));
        out
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.projection.tensors_mut();
        out.extend(self.classifier.tensors_mut());
        out
    }
}

/// Mean frame of an utterance, the probe's `PooledFrames` input.
pub fn pooled_features(utt: &UtteranceRecord) -> Vec<f64> {
    utt.frames.column_means()
}

impl ProbeModel {
    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Speaker representation of a feature vector.
    pub fn embed_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_mean.len() {
            return Err(Error::shape("probe features", self.feature_mean.len(), features.len()));
        }
        Ok(self.projection.forward(&self.standardise(features)))
    }

    /// Speaker representation of an utterance; needs a `PooledFrames` probe.
    pub fn embed_utterance(&self, utt: &UtteranceRecord) -> Result<Vec<f64>> {
        if self.input != ProbeInput::PooledFrames {
            return Err(Error::Unsupported(
                "this probe reads external features; embed them with embed_features".into(),
            ));
        }
        self.embed_features(&pooled_features(utt))
    }

    /// Index into `speakers` of the predicted speaker.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        let z = self.embed_features(features)?;
        Ok(nn::argmax(&self.classifier.forward(&z)))
    }

    /// Fraction of examples whose predicted speaker matches; unknown speakers count as misses.
    pub fn accuracy(&self, features: &[Vec<f64>], speaker_labels: &[String]) -> Result<f64> {
        if features.len() != speaker_labels.len() || features.is_empty() {
            return Err(Error::shape("probe evaluation set", features.len(), speaker_labels.len()));
        }
        let mut correct = 0;
        for (x, label) in features.iter().zip(speaker_labels) {
            if self.speakers[self.predict(x)?] == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / features.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = ProbeMeta {
            config: self.config.clone(),
            input: self.input,
            speakers: self.speakers.clone(),
            feature_dim: self.feature_mean.len(),
        };
        checkpoint::encode("probe", serde_json::to_value(meta).expect("meta serializes"), &self.tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode(bytes, "probe")?;
        let meta: ProbeMeta = serde_json::from_value(header.config.clone())
            .map_err(|e| Error::validation("checkpoint config", e.to_string()))?;
        let mut model = ProbeModel {
            projection: Linear::zeros(meta.feature_dim, meta.config.probe_dim),
            classifier: Linear::zeros(meta.config.probe_dim, meta.speakers.len()),
            feature_mean: vec![0.0; meta.feature_dim],
            feature_scale: vec![0.0; meta.feature_dim],
            config: meta.config,
            input: meta.input,
            speakers: meta.speakers,
        };
        let tensors = checkpoint::restore(&model.tensors(), &header, tensors)?;
        for (slot, data) in model.tensors_mut().into_iter().zip(tensors) {
            slot.copy_from_slice(&data);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// Fits a speaker probe with full-batch Adam on cross-entropy.
pub fn train_speaker_probe(
    features: &[Vec<f64>],
    speaker_labels: &[String],
    input: ProbeInput,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    config.validate()?;
    if features.len() != speaker_labels.len() {
        return Err(Error::shape("probe labels", features.len(), speaker_labels.len()));
    }
    let speakers: Vec<String> = speaker_labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if speakers.len() < 2 {
        return Err(Error::validation("speaker_labels", "a speaker probe needs at least 2 speakers"));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::shape("probe features", dim, bad.len()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = ProbeModel {
        config: config.clone(),
        input,
        projection: Linear::new(dim, config.probe_dim, &mut rng),
        classifier: Linear::new(config.probe_dim, speakers.len(), &mut rng),
        speakers,
        feature_mean: mean,
        feature_scale: scale,
    };
    let inputs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardise(f)).collect();
    let targets: Vec<usize> = speaker_labels
        .iter()
        .map(|l| probe.speakers.binary_search(l).expect("label in speaker set"))
        .collect();

    let mut optimizer = Adam::new(config.learning_rate);
    let mut grads = ProbeGrads {
        projection: probe.projection.zeros_like(),
        classifier: probe.classifier.zeros_like(),
    };
    for _ in 0..config.steps {
        grads.zero();
        for (x, &y) in inputs.iter().zip(&targets) {
            let z = probe.projection.forward(x);
            let mut d_logits = nn::softmax(&probe.classifier.forward(&z));
            d_logits[y] -= 1.0;
            d_logits.iter_mut().for_each(|d| *d /= n);
            let mut dz = vec![0.0; z.len()];
            probe.classifier.backward(&z, &d_logits, &mut grads.classifier, Some(&mut dz));
            probe.projection.backward(x, &dz, &mut grads.projection, None);
        }
        let mut params = ProbeParams {
            projection: &mut probe.projection,
            classifier: &mut probe.classifier,
        };
        optimizer.step(&mut params, &grads);
    }
    Ok(probe)
}

/// Cosine similarity of the probe's speaker representations of two utterances.
pub fn spk_cos(probe: &ProbeModel, utt_a: &UtteranceRecord, utt_b: &UtteranceRecord) -> Result<f64> {
    cosine_similarity(&probe.embed_utterance(utt_a)?, &probe.embed_utterance(utt_b)?)
}

/// Speaker-probe accuracy on frozen accent embeddings: train on `split.train`, score on
/// the held-out seen-speaker utterances.
pub fn embedding_probe_accuracy(
    model: &AidModel,
    corpus: &Corpus,
    split: &SplitSet,
    config: &ProbeConfig,
) -> Result<f64> {
    let train = embed_utterances(model, corpus, &split.train)?;
    let held_ids: Vec<String> = split.valid_seen.iter().chain(&split.test_seen).cloned().collect();
    let held = embed_utterances(model, corpus, &held_ids)?;
    let (xs, ys): (Vec<_>, Vec<_>) = train.into_iter().map(|e| (e.vector, e.speaker_id)).unzip();
    let probe = train_speaker_probe(&xs, &ys, ProbeInput::Features, config)?;
    let (hx, hy): (Vec<_>, Vec<_>) = held.into_iter().map(|e| (e.vector, e.speaker_id)).unzip();
    probe.accuracy(&hx, &hy)
}

/// Trains a pooled-frame speaker probe on the training split.
pub fn train_frame_probe(corpus: &Corpus, ids: &[String], config: &ProbeConfig) -> Result<ProbeModel> {
    let mut xs = Vec::with_capacity(ids.len());
    let mut ys = Vec::with_capacity(ids.len());
    for id in ids {
        let utt = corpus.get(id)?;
        xs.push(pooled_features(utt));
        ys.push(utt.speaker_id.clone());
    }
    train_speaker_probe(&xs, &ys, ProbeInput::PooledFrames, config)
}

/// Full evaluation of an accent identifier on the test parts of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AidEvaluation {
    pub seen: MetricsReport,
    pub unseen: MetricsReport,
    pub gap: GapReport,
    pub scsc: ScscReport,
    pub speaker_probe_accuracy: f64,
}

pub fn evaluate_aid(model: &AidModel, corpus: &Corpus, split: &SplitSet, probe: &ProbeConfig) -> Result<AidEvaluation> {
    let seen = evaluate_accuracy(model, corpus, &split.test_seen)?;
    let unseen = evaluate_accuracy(model, corpus, &split.test_unseen)?;
    let gap = generalisation_gap(&seen, &unseen);
    let scsc = scsc(&embed_utterances(model, corpus, &split.test_unseen)?)?;
    let speaker_probe_accuracy = embedding_probe_accuracy(model, corpus, split, probe)?;
    Ok(AidEvaluation {
        seen,
        unseen,
        gap,
        scsc,
        speaker_probe_accuracy,
    })
}

pub const EMBED_FORMAT: &str = "aidembed";

#[derive(Serialize, Deserialize)]
struct EmbedHeader {
    format: String,
    version: u32,
    dim: usize,
    #[serde(default)]
    dtype: Dtype,
}

#[derive(Serialize, Deserialize)]
struct EmbedLine {
    utt_id: String,
    speaker_id: String,
    accent_label: String,
    offset: usize,
}

/// Writes an embedding index at `path` and its blob next to it (same stem, `.bin`).
pub fn write_embeddings(rows: &[LabeledEmbedding], path: &Path) -> Result<PathBuf> {
    if rows.is_empty() {
        return Err(Error::validation("embeddings", "nothing to export"));
    }
    let dim = rows[0].vector.len();
    if let Some(bad) = rows.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::shape(format!("embedding of {}", bad.utt_id), dim, bad.vector.len()));
    }
    let blob_path = path.with_extension("bin");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let mut index = Vec::new();
    let header = EmbedHeader {
        format: EMBED_FORMAT.into(),
        version: 1,
        dim,
        dtype: Dtype::F64,
    };
    writeln!(index, "{}", serde_json::to_string(&header).expect("header serializes")).expect("vec write");
    let mut bytes = Vec::with_capacity(rows.len() * dim * 8);
    for r in rows {
        let line = EmbedLine {
            utt_id: r.utt_id.clone(),
            speaker_id: r.speaker_id.clone(),
            accent_label: r.accent_label.clone(),
            offset: bytes.len(),
        };
        blob::push_f64s(&mut bytes, &r.vector);
        writeln!(index, "{}", serde_json::to_string(&line).expect("line serializes")).expect("vec write");
    }
    fs::write(&blob_path, &bytes).map_err(|e| Error::io(format!("writing {}", blob_path.display()), e))?;
    fs::write(path, &index).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path.to_path_buf())
}

/// Embeds `ids` with the model and writes them grouped by accent label.
pub fn export_embeddings(model: &AidModel, corpus: &Corpus, ids: &[String], path: &Path) -> Result<PathBuf> {
    if ids.is_empty() {
        return Err(Error::validation("utt_set", "nothing to export"));
    }
    let mut rows = embed_utterances(model, corpus, ids)?;
    rows.sort_by(|a, b| (&a.accent_label, &a.speaker_id, &a.utt_id).cmp(&(&b.accent_label, &b.speaker_id, &b.utt_id)));
    write_embeddings(&rows, path)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<LabeledEmbedding>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(file).lines();
    let header: EmbedHeader = match lines.next() {
        Some(l) => {
            let l = l.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            serde_json::from_str(&l).map_err(|e| parse_err(1, e.to_string()))?
        }
        None => return Err(parse_err(1, "missing header line".into())),
    };
    if header.format != EMBED_FORMAT {
        return Err(parse_err(1, format!("unexpected format '{}'", header.format)));
    }
    let blob_path = path.with_extension("bin");
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(format!("reading {}", blob_path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: EmbedLine = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
        let vector = blob::read_floats(&bytes, entry.offset, header.dim, header.dtype)?;
        out.push(LabeledEmbedding {
            utt_id: entry.utt_id,
            speaker_id: entry.speaker_id,
            accent_label: entry.accent_label,
            vector,
        });
    }
    Ok(out)
}

/// Uniform-random class predictions over a balanced label set; the chance-level reference.
pub fn random_baseline_accuracy(n_classes: usize, per_class: usize, seed: u64) -> Result<MetricsReport> {
    use rand::Rng;
    let accents: Vec<String> = (0..n_classes).map(|i| format!("c{i:02}")).collect();
    let mut truths: Vec<usize> = (0..n_classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truths.shuffle(&mut rng);
    let preds: Vec<usize> = truths.iter().map(|_| rng.random_range(0..n_classes)).collect();
    classification_report(&preds, &truths, &accents)
}
