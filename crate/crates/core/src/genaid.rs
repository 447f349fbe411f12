//! Accent identification with an information bottleneck and a speaker-uniformity penalty.
//!
//! Architecture: a frame-wise two-layer perceptron with temporal mean pooling produces `h`;
//! an optional two-layer GELU bottleneck maps `h` to the accent embedding `h'`; an accent
//! head and a speaker head read `h'`. Training minimises
//! `cross_entropy(accent) + alpha * mean_i (p_i(speaker) - 1/N)^2`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::checkpoint;
use crate::corpus::{Corpus, FrameMatrix, UtteranceRecord};
use crate::error::{Error, Result};
use crate::eval::evaluate_accuracy;
use crate::nn::{self, gelu, gelu_grad, Adam, Linear, Parameters, TensorRef};
use crate::splits::{compute_sampling_weights, sample_batch, SplitSet, WeightTable};

/// Which held-out speakers drive checkpoint selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSpeakers {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AidConfig {
    /// Frame feature dimension; 0 means "take it from the corpus".
    pub input_dim: usize,
    pub encoder_hidden: usize,
    /// Width of the pooled encoder output `h`.
    pub embed_dim: usize,
    pub bottleneck_dim: usize,
    /// Without the bottleneck `h' = h`.
    pub use_bottleneck: bool,
    /// 0 means "derive from the split".
    pub n_accents: usize,
    /// 0 means "derive from the split".
    pub n_speakers: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub validate_on: ValidationSpeakers,
    pub weighted_sampling: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for AidConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            encoder_hidden: 32,
            embed_dim: 32,
            bottleneck_dim: 4,
            use_bottleneck: true,
            n_accents: 0,
            n_speakers: 0,
            alpha: 10.0,
            learning_rate: 3e-3,
            batch_size: 32,
            max_steps: 3000,
            eval_interval: 100,
            patience: 10,
            validate_on: ValidationSpeakers::Unseen,
            weighted_sampling: true,
            augment: true,
            seed: 0,
        }
    }
}

impl AidConfig {
    /// Full-scale hyperparameters: 64-dimensional bottleneck, alpha 10, learning rate 1e-4, 13 accents.
    pub fn paper_reference() -> Self {
        Self {
            encoder_hidden: 256,
            embed_dim: 256,
            bottleneck_dim: 64,
            n_accents: 13,
            alpha: 10.0,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("aid.encoder_hidden", self.encoder_hidden),
            ("aid.embed_dim", self.embed_dim),
            ("aid.bottleneck_dim", self.bottleneck_dim),
            ("aid.batch_size", self.batch_size),
            ("aid.eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.use_bottleneck && self.bottleneck_dim >= self.embed_dim {
            return Err(Error::validation(
                "aid.bottleneck_dim",
                format!(
                    "bottleneck must reduce dimension ({} >= embed_dim {})",
                    self.bottleneck_dim, self.embed_dim
                ),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("aid.alpha", "must be a finite non-negative number"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("aid.learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Fills data-derived fields, rejecting explicit values that disagree with the data.
    pub fn resolve(&self, input_dim: usize, n_accents: usize, n_speakers: usize) -> Result<Self> {
        self.validate()?;
        let pick = |name: &str, configured: usize, actual: usize| -> Result<usize> {
            match configured {
                0 => Ok(actual),
                c if c == actual => Ok(c),
                c => Err(Error::validation(
                    name,
                    format!("configured {c} but the data has {actual}"),
                )),
            }
        };
        Ok(Self {
            input_dim: pick("aid.input_dim", self.input_dim, input_dim)?,
            n_accents: pick("aid.n_accents", self.n_accents, n_accents)?,
            n_speakers: pick("aid.n_speakers", self.n_speakers, n_speakers)?,
            ..self.clone()
        })
    }

    /// Width of the accent embedding `h'`.
    pub fn accent_embed_dim(&self) -> usize {
        if self.use_bottleneck {
            self.bottleneck_dim
        } else {
            self.embed_dim
        }
    }
}

/// Pooled encoder output and its bottleneck projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedUtterance {
    pub h: Vec<f64>,
    pub h_prime: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AidOutput {
    pub encoded: EncodedUtterance,
    pub accent_logits: Vec<f64>,
    pub speaker_probs: Vec<f64>,
}

/// Loss terms of one example. `total` is computed as `acc_clf + alpha * adv_mse`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub acc_clf: f64,
    pub adv_mse: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub layer1: Linear,
    pub layer2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AidModel {
    pub config: AidConfig,
    /// Accent label of each accent-head output.
    pub accents: Vec<String>,
    /// Speaker label of each speaker-head output.
    pub speakers: Vec<String>,
    pub encoder1: Linear,
    pub encoder2: Linear,
    pub bottleneck: Option<Bottleneck>,
    pub accent_head: Linear,
    pub speaker_head: Linear,
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    h: Vec<f64>,
    bn_pre1: Vec<f64>,
    bn_act1: Vec<f64>,
    bn_pre2: Vec<f64>,
    h_prime: Vec<f64>,
    accent_logits: Vec<f64>,
    speaker_probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AidCheckpointMeta {
    config: AidConfig,
    accents: Vec<String>,
    speakers: Vec<String>,
}

impl AidModel {
    /// Randomly initialised model. `config` must already be resolved against the data.
    pub fn new(config: AidConfig, accents: Vec<String>, speakers: Vec<String>) -> Result<Self> {
        config.validate()?;
        if config.input_dim == 0 {
            return Err(Error::validation("aid.input_dim", "unresolved (0)"));
        }
        if accents.len() != config.n_accents {
            return Err(Error::shape("accent labels", config.n_accents, accents.len()));
        }
        if speakers.len() != config.n_speakers || speakers.is_empty() {
            return Err(Error::shape("speaker labels", config.n_speakers, speakers.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder1 = Linear::new(config.input_dim, config.encoder_hidden, &mut rng);
        let encoder2 = Linear::new(config.encoder_hidden, config.embed_dim, &mut rng);
        let bottleneck = config.use_bottleneck.then(|| Bottleneck {
            layer1: Linear::new(config.embed_dim, config.bottleneck_dim, &mut rng),
            layer2: Linear::new(config.bottleneck_dim, config.bottleneck_dim, &mut rng),
        });
        let e = config.accent_embed_dim();
        let accent_head = Linear::new(e, config.n_accents, &mut rng);
        let speaker_head = Linear::new(e, config.n_speakers, &mut rng);
        Ok(Self {
            config,
            accents,
            speakers,
            encoder1,
            encoder2,
            bottleneck,
            accent_head,
            speaker_head,
        })
    }

    /// Same shapes, all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn accent_embed_dim(&self) -> usize {
        self.config.accent_embed_dim()
    }

    fn check_input(&self, frames: &FrameMatrix) -> Result<()> {
        if frames.dim() != self.config.input_dim {
            return Err(Error::shape("frame dimension", self.config.input_dim, frames.dim()));
        }
        if frames.n_frames() == 0 {
            return Err(Error::validation("frames", "utterance has no frames"));
        }
        Ok(())
    }

    fn trace(&self, frames: &FrameMatrix) -> Result<Trace> {
        self.check_input(frames)?;
        let t_len = frames.n_frames();
        let (hid, emb) = (self.config.encoder_hidden, self.config.embed_dim);
        let mut pre1 = vec![0.0; t_len * hid];
        let mut act1 = vec![0.0; t_len * hid];
        let mut pre2 = vec![0.0; t_len * emb];
        let mut h = vec![0.0; emb];
        for (t, x) in frames.rows().enumerate() {
            let p1 = &mut pre1[t * hid..(t + 1) * hid];
            self.encoder1.forward_into(x, p1);
            let a1 = &mut act1[t * hid..(t + 1) * hid];
            for (a, p) in a1.iter_mut().zip(p1.iter()) {
                *a = gelu(*p);
            }
            let p2 = &mut pre2[t * emb..(t + 1) * emb];
            self.encoder2.forward_into(a1, p2);
            for (acc, p) in h.iter_mut().zip(p2.iter()) {
                *acc += gelu(*p);
            }
        }
        let inv_t = 1.0 / t_len as f64;
        h.iter_mut().for_each(|v| *v *= inv_t);

        let (bn_pre1, bn_act1, bn_pre2, h_prime) = match &self.bottleneck {
            Some(bn) => {
                let bp1 = bn.layer1.forward(&h);
                let ba1: Vec<f64> = bp1.iter().map(|&v| gelu(v)).collect();
                let bp2 = bn.layer2.forward(&ba1);
                let hp = bp2.iter().map(|&v| gelu(v)).collect();
                (bp1, ba1, bp2, hp)
            }
            None => (Vec::new(), Vec::new(), Vec::new(), h.clone()),
        };
        let accent_logits = self.accent_head.forward(&h_prime);
        let speaker_probs = nn::softmax(&self.speaker_head.forward(&h_prime));
        Ok(Trace {
            pre1,
            act1,
            pre2,
            h,
            bn_pre1,
            bn_act1,
            bn_pre2,
            h_prime,
            accent_logits,
            speaker_probs,
        })
    }

    fn backward(
        &self,
        frames: &FrameMatrix,
        tr: &Trace,
        d_accent_logits: &[f64],
        d_speaker_probs: &[f64],
        grad: &mut AidModel,
    ) {
        let mut dh_prime = vec![0.0; tr.h_prime.len()];
        self.accent_head
            .backward(&tr.h_prime, d_accent_logits, &mut grad.accent_head, Some(&mut dh_prime));
        let d_spk_logits = nn::softmax_backward(&tr.speaker_probs, d_speaker_probs);
        self.speaker_head
            .backward(&tr.h_prime, &d_spk_logits, &mut grad.speaker_head, Some(&mut dh_prime));

        let dh = match (&self.bottleneck, &mut grad.bottleneck) {
            (Some(bn), Some(gbn)) => {
                let d_pre2: Vec<f64> = dh_prime
                    .iter()
                    .zip(&tr.bn_pre2)
                    .map(|(d, p)| d * gelu_grad(*p))
                    .collect();
                let mut d_act1 = vec![0.0; tr.bn_act1.len()];
                bn.layer2.backward(&tr.bn_act1, &d_pre2, &mut gbn.layer2, Some(&mut d_act1));
                let d_pre1: Vec<f64> = d_act1
                    .iter()
                    .zip(&tr.bn_pre1)
                    .map(|(d, p)| d * gelu_grad(*p))
                    .collect();
                let mut dh = vec![0.0; tr.h.len()];
                bn.layer1.backward(&tr.h, &d_pre1, &mut gbn.layer1, Some(&mut dh));
                dh
            }
            _ => dh_prime,
        };

        let t_len = frames.n_frames();
        let (hid, emb) = (self.config.encoder_hidden, self.config.embed_dim);
        let inv_t = 1.0 / t_len as f64;
        let mut d_pre2 = vec![0.0; emb];
        let mut d_act1 = vec![0.0; hid];
        let mut d_pre1 = vec![0.0; hid];
        for (t, x) in frames.rows().enumerate() {
            let p2 = &tr.pre2[t * emb..(t + 1) * emb];
            for ((d, g), p) in d_pre2.iter_mut().zip(&dh).zip(p2) {
                *d = g * inv_t * gelu_grad(*p);
            }
            d_act1.fill(0.0);
            self.encoder2.backward(
                &tr.act1[t * hid..(t + 1) * hid],
                &d_pre2,
                &mut grad.encoder2,
                Some(&mut d_act1),
            );
            let p1 = &tr.pre1[t * hid..(t + 1) * hid];
            for ((d, g), p) in d_pre1.iter_mut().zip(&d_act1).zip(p1) {
                *d = g * gelu_grad(*p);
            }
            self.encoder1.backward(x, &d_pre1, &mut grad.encoder1, None);
        }
    }

    /// Loss of one labelled utterance; adds `scale * dLoss/dθ` into `grad`.
    pub fn loss_and_grad(
        &self,
        frames: &FrameMatrix,
        accent_label: usize,
        scale: f64,
        grad: &mut AidModel,
    ) -> Result<LossBreakdown> {
        let tr = self.trace(frames)?;
        let loss = total_loss(&tr.accent_logits, accent_label, &tr.speaker_probs, self.config.alpha)?;
        let mut d_logits = nn::softmax(&tr.accent_logits);
        d_logits[accent_label] -= 1.0;
        d_logits.iter_mut().for_each(|v| *v *= scale);
        let d_probs = adversarial_uniformity_grad(&tr.speaker_probs)
            .into_iter()
            .map(|g| g * self.config.alpha * scale)
            .collect::<Vec<_>>();
        self.backward(frames, &tr, &d_logits, &d_probs, grad);
        Ok(loss)
    }

    /// Loss of one labelled utterance without gradients.
    pub fn loss(&self, frames: &FrameMatrix, accent_label: usize) -> Result<LossBreakdown> {
        let tr = self.trace(frames)?;
        total_loss(&tr.accent_logits, accent_label, &tr.speaker_probs, self.config.alpha)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = AidCheckpointMeta {
            config: self.config.clone(),
            accents: self.accents.clone(),
            speakers: self.speakers.clone(),
        };
        checkpoint::encode("aid", serde_json::to_value(meta).expect("meta serializes"), &self.tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode(bytes, "aid")?;
        let meta: AidCheckpointMeta = serde_json::from_value(header.config.clone())
            .map_err(|e| Error::validation("checkpoint config", e.to_string()))?;
        let mut model = AidModel::new(meta.config, meta.accents, meta.speakers)?;
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

impl Parameters for AidModel {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.encoder1.tensors("encoder.layer1");
        out.extend(self.encoder2.tensors("encoder.layer2"));
        if let Some(bn) = &self.bottleneck {
            out.extend(bn.layer1.tensors("bottleneck.layer1"));
            out.extend(bn.layer2.tensors("bottleneck.layer2"));
        }
        out.extend(self.accent_head.tensors("accent_head"));
        out.extend(self.speaker_head.tensors("speaker_head"));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder1.tensors_mut();
        out.extend(self.encoder2.tensors_mut());
        if let Some(bn) = &mut self.bottleneck {
            out.extend(bn.layer1.tensors_mut());
            out.extend(bn.layer2.tensors_mut());
        }
        out.extend(self.accent_head.tensors_mut());
        out.extend(self.speaker_head.tensors_mut());
        out
    }
}

/// Encoder, bottleneck and both heads applied to one utterance.
pub fn aid_forward(model: &AidModel, utt: &UtteranceRecord) -> Result<AidOutput> {
    let tr = model.trace(&utt.frames)?;
    Ok(AidOutput {
        encoded: EncodedUtterance {
            h: tr.h,
            h_prime: tr.h_prime,
        },
        accent_logits: tr.accent_logits,
        speaker_probs: tr.speaker_probs,
    })
}

/// The accent embedding `h'` (post-activation bottleneck output).
pub fn extract_accent_embedding(model: &AidModel, utt: &UtteranceRecord) -> Result<Vec<f64>> {
    Ok(model.trace(&utt.frames)?.h_prime)
}

/// Index into `model.accents` of the most probable accent.
pub fn predict_accent(model: &AidModel, utt: &UtteranceRecord) -> Result<usize> {
    Ok(nn::argmax(&model.trace(&utt.frames)?.accent_logits))
}

/// Mean squared deviation of a speaker distribution from uniform.
pub fn adversarial_uniformity_loss(speaker_probs: &[f64]) -> Result<f64> {
    check_simplex(speaker_probs)?;
    let n = speaker_probs.len() as f64;
    let u = 1.0 / n;
    Ok(speaker_probs.iter().map(|p| (p - u) * (p - u)).sum::<f64>() / n)
}

fn adversarial_uniformity_grad(speaker_probs: &[f64]) -> Vec<f64> {
    let n = speaker_probs.len() as f64;
    speaker_probs.iter().map(|p| 2.0 * (p - 1.0 / n) / n).collect()
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::validation("speaker_probs", "empty distribution"));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::validation("speaker_probs", format!("entry {v} is not a probability")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::validation("speaker_probs", format!("entries sum to {sum}, not 1")));
    }
    Ok(())
}

/// Accent cross-entropy plus the weighted uniformity penalty.
pub fn total_loss(
    accent_logits: &[f64],
    accent_label: usize,
    speaker_probs: &[f64],
    alpha: f64,
) -> Result<LossBreakdown> {
    if accent_label >= accent_logits.len() {
        return Err(Error::validation(
            "accent_label",
            format!("index {accent_label} out of range for {} accents", accent_logits.len()),
        ));
    }
    let acc_clf = nn::log_sum_exp(accent_logits) - accent_logits[accent_label];
    let adv_mse = adversarial_uniformity_loss(speaker_probs)?;
    Ok(LossBreakdown {
        acc_clf,
        adv_mse,
        total: acc_clf + alpha * adv_mse,
        alpha,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub acc_clf: f64,
    pub adv_mse: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_unseen_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_seen_f1: Option<f64>,
}

impl LogEntry {
    pub fn valid_f1(&self) -> Option<f64> {
        self.valid_unseen_f1.or(self.valid_seen_f1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub optimizer: String,
    pub validate_on: ValidationSpeakers,
    pub entries: Vec<LogEntry>,
    pub best_step: Option<usize>,
    pub best_valid_f1: Option<f64>,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// One JSON object per logged step.
    pub fn to_json_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Labels of `ids` as indices into `split.eligible_accents`.
pub(crate) fn accent_indices(corpus: &Corpus, split: &SplitSet, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            let accent = &corpus.get(id)?.accent_label;
            split.accent_index(accent).ok_or_else(|| Error::Unknown {
                kind: "accent",
                id: accent.clone(),
            })
        })
        .collect()
}

/// Trains an accent identifier on `split.train`, keeping the checkpoint with the best
/// validation macro-F1.
pub fn train_aid(
    config: &AidConfig,
    split: &SplitSet,
    corpus: &Corpus,
    augment: &AugmentConfig,
) -> Result<(AidModel, TrainingLog)> {
    let speakers = split.train_speakers(corpus)?;
    let config = config.resolve(corpus.dim(), split.eligible_accents.len(), speakers.len())?;
    if config.augment {
        augment.validate()?;
    }
    let mut model = AidModel::new(config.clone(), split.eligible_accents.clone(), speakers)?;
    let mut optimizer = Adam::new(config.learning_rate);
    let mut log = TrainingLog {
        optimizer: optimizer.describe(),
        validate_on: config.validate_on,
        entries: Vec::new(),
        best_step: None,
        best_valid_f1: None,
        stopped_early: false,
    };
    if config.max_steps == 0 {
        return Ok((model, log));
    }

    let valid_ids = match config.validate_on {
        ValidationSpeakers::Unseen => &split.valid_unseen,
        ValidationSpeakers::Seen => &split.valid_seen,
    };
    let weights = if config.weighted_sampling {
        compute_sampling_weights(split, corpus)?
    } else {
        WeightTable::uniform(split)?
    };
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sampler_rng.set_stream(1);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(config.seed ^ augment.seed);
    augment_rng.set_stream(2);

    let mut grad = model.zeros_like();
    let mut best: Option<(f64, AidModel)> = None;
    let mut since_best = 0;
    for step in 1..=config.max_steps {
        let ids = sample_batch(&weights, config.batch_size, &mut sampler_rng)?;
        let mut batch = ids
            .iter()
            .map(|id| corpus.get(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        if config.augment {
            batch = augment_batch(&batch, augment, &mut augment_rng)?;
        }
        let labels = accent_indices(corpus, split, &ids)?;

        grad.zero();
        let scale = 1.0 / batch.len() as f64;
        let (mut acc_clf, mut adv_mse) = (0.0, 0.0);
        for (utt, &label) in batch.iter().zip(&labels) {
            let l = model.loss_and_grad(&utt.frames, label, scale, &mut grad)?;
            acc_clf += l.acc_clf * scale;
            adv_mse += l.adv_mse * scale;
        }
        let total = acc_clf + config.alpha * adv_mse;
        if !total.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("acc_clf={acc_clf}, adv_mse={adv_mse}, total={total}"),
            });
        }
        optimizer.step(&mut model, &grad);
        if !model.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }

        let mut entry = LogEntry {
            step,
            acc_clf,
            adv_mse,
            total,
            valid_unseen_f1: None,
            valid_seen_f1: None,
        };
        if step % config.eval_interval == 0 || step == config.max_steps {
            let f1 = evaluate_accuracy(&model, corpus, valid_ids)?.macro_f1;
            match config.validate_on {
                ValidationSpeakers::Unseen => entry.valid_unseen_f1 = Some(f1),
                ValidationSpeakers::Seen => entry.valid_seen_f1 = Some(f1),
            }
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, model.clone()));
                log.best_step = Some(step);
                log.best_valid_f1 = Some(f1);
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log.entries.push(entry);
        if since_best >= config.patience.max(1) {
            log.stopped_early = step < config.max_steps;
            break;
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, log))
}
