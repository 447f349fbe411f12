//! Token-to-frames generator conditioned on frozen accent embeddings.
//!
//! Each token embedding is concatenated with the accent embedding and encoded by a
//! two-layer perceptron. A duration predictor reads the encoded token; a frame decoder
//! reads the encoded token concatenated with a speaker vector. Frames are produced by
//! repeating each decoded token for its predicted duration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{Corpus, FactorTable, FrameMatrix, UtteranceRecord};
use crate::error::{Error, Result};
use crate::eval::{acc_cos, spk_cos, ProbeInput, ProbeModel};
use crate::genaid::{extract_accent_embedding, predict_accent, AidModel};
use crate::nn::{gelu, gelu_grad, Adam, Linear, Parameters, TensorRef};
use crate::splits::SplitSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// 0 means "take it from the factor table".
    pub token_vocab: usize,
    pub token_embed_dim: usize,
    /// Must equal the accent-embedding width of the frozen accent identifier.
    pub accent_embed_dim: usize,
    /// Must equal the speaker probe's representation width.
    pub speaker_embed_dim: usize,
    pub decoder_hidden: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub duration_loss_weight: f64,
    /// Accents withheld from generator training, for unseen-accent generation.
    pub held_out_accents: Vec<String>,
    /// Ablation: feed zeros instead of accent embeddings, in training and synthesis.
    pub zero_accent: bool,
    /// Probability of replacing a training example's speaker vector with zeros.
    pub speaker_dropout: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            token_vocab: 0,
            token_embed_dim: 8,
            accent_embed_dim: 4,
            speaker_embed_dim: 16,
            decoder_hidden: 48,
            learning_rate: 3e-3,
            max_steps: 2000,
            batch_size: 16,
            duration_loss_weight: 1.0,
            held_out_accents: Vec::new(),
            zero_accent: false,
            speaker_dropout: 0.6,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gen.token_embed_dim", self.token_embed_dim),
            ("gen.accent_embed_dim", self.accent_embed_dim),
            ("gen.speaker_embed_dim", self.speaker_embed_dim),
            ("gen.decoder_hidden", self.decoder_hidden),
            ("gen.batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("gen.learning_rate", "must be positive"));
        }
        if !(self.duration_loss_weight >= 0.0 && self.duration_loss_weight.is_finite()) {
            return Err(Error::validation("gen.duration_loss_weight", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.speaker_dropout) {
            return Err(Error::validation("gen.speaker_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenModel {
    pub config: GenConfig,
    pub frame_dim: usize,
    /// Row-major `token_vocab × token_embed_dim`.
    pub token_embedding: Vec<f64>,
    pub encoder1: Linear,
    pub encoder2: Linear,
    pub duration1: Linear,
    pub duration2: Linear,
    pub decoder1: Linear,
    pub decoder2: Linear,
    /// Training speakers, sorted; row `i` of `speaker_table` belongs to `speakers[i]`.
    pub speakers: Vec<String>,
    /// Probe-derived speaker vectors, fixed during training.
    pub speaker_table: Vec<f64>,
    pub trained_accents: Vec<String>,
}

struct TokenTrace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    enc: Vec<f64>,
    dur_pre: Vec<f64>,
    dur_act: Vec<f64>,
    log_duration: f64,
    dec_input: Vec<f64>,
    dec_pre: Vec<f64>,
    dec_act: Vec<f64>,
    frame: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GenMeta {
    config: GenConfig,
    frame_dim: usize,
    speakers: Vec<String>,
    trained_accents: Vec<String>,
}

/// Converts predicted log-durations to frame counts: `max(1, round(exp(d)))`.
pub fn durations_from_log(log_durations: &[f64]) -> Vec<usize> {
    log_durations
        .iter()
        .map(|d| (d.exp().round() as usize).max(1))
        .collect()
}

impl GenModel {
    fn new(config: GenConfig, frame_dim: usize, speakers: Vec<String>, speaker_table: Vec<f64>, trained_accents: Vec<String>) -> Result<Self> {
        config.validate()?;
        if config.token_vocab == 0 {
            return Err(Error::validation("gen.token_vocab", "unresolved (0)"));
        }
        if speaker_table.len() != speakers.len() * config.speaker_embed_dim {
            return Err(Error::shape("speaker table", speakers.len() * config.speaker_embed_dim, speaker_table.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, a, s, h) = (
            config.token_embed_dim,
            config.accent_embed_dim,
            config.speaker_embed_dim,
            config.decoder_hidden,
        );
        let token_embedding = (0..config.token_vocab * e)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Ok(Self {
            token_embedding,
            encoder1: Linear::new(e + a, h, &mut rng),
            encoder2: Linear::new(h, h, &mut rng),
            duration1: Linear::new(h, h, &mut rng),
            duration2: Linear::new(h, 1, &mut rng),
            decoder1: Linear::new(h + s, h, &mut rng),
            decoder2: Linear::new(h, frame_dim, &mut rng),
            config,
            frame_dim,
            speakers,
            speaker_table,
            trained_accents,
        })
    }

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::validation("tokens", "token sequence is empty"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.token_vocab) {
            return Err(Error::validation(
                "tokens",
                format!("token {t} outside vocabulary of {}", self.config.token_vocab),
            ));
        }
        Ok(())
    }

    fn check_conditioning(&self, accent: &[f64], speaker: &[f64]) -> Result<()> {
        if accent.len() != self.config.accent_embed_dim {
            return Err(Error::shape("accent embedding", self.config.accent_embed_dim, accent.len()));
        }
        if speaker.len() != self.config.speaker_embed_dim {
            return Err(Error::shape("speaker embedding", self.config.speaker_embed_dim, speaker.len()));
        }
        Ok(())
    }

    /// Accent vector actually fed to the network (zeros under the ablation).
    fn conditioning<'a>(&self, accent: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
        if self.config.zero_accent {
            std::borrow::Cow::Owned(vec![0.0; accent.len()])
        } else {
            std::borrow::Cow::Borrowed(accent)
        }
    }

    fn token_input(&self, token: usize, accent: &[f64]) -> Vec<f64> {
        let e = self.config.token_embed_dim;
        let mut input = Vec::with_capacity(e + accent.len());
        input.extend_from_slice(&self.token_embedding[token * e..(token + 1) * e]);
        input.extend_from_slice(accent);
        input
    }

    fn trace_token(&self, token: usize, accent: &[f64], speaker: &[f64]) -> TokenTrace {
        let input = self.token_input(token, accent);
        let pre1 = self.encoder1.forward(&input);
        let act1: Vec<f64> = pre1.iter().map(|&v| gelu(v)).collect();
        let pre2 = self.encoder2.forward(&act1);
        let enc: Vec<f64> = pre2.iter().map(|&v| gelu(v)).collect();
        let dur_pre = self.duration1.forward(&enc);
        let dur_act: Vec<f64> = dur_pre.iter().map(|&v| gelu(v)).collect();
        let log_duration = self.duration2.forward(&dur_act)[0];
        let mut dec_input = enc.clone();
        dec_input.extend_from_slice(speaker);
        let dec_pre = self.decoder1.forward(&dec_input);
        let dec_act: Vec<f64> = dec_pre.iter().map(|&v| gelu(v)).collect();
        let frame = self.decoder2.forward(&dec_act);
        TokenTrace {
            input,
            pre1,
            act1,
            pre2,
            enc,
            dur_pre,
            dur_act,
            log_duration,
            dec_input,
            dec_pre,
            dec_act,
            frame,
        }
    }

    fn backward_token(&self, tr: &TokenTrace, token: usize, d_frame: &[f64], d_log_duration: f64, grad: &mut GenModel) {
        let h = self.config.decoder_hidden;
        let mut d_dec_act = vec![0.0; h];
        self.decoder2.backward(&tr.dec_act, d_frame, &mut grad.decoder2, Some(&mut d_dec_act));
        let d_dec_pre: Vec<f64> = d_dec_act.iter().zip(&tr.dec_pre).map(|(d, p)| d * gelu_grad(*p)).collect();
        let mut d_dec_input = vec![0.0; tr.dec_input.len()];
        self.decoder1.backward(&tr.dec_input, &d_dec_pre, &mut grad.decoder1, Some(&mut d_dec_input));
        let mut d_enc = d_dec_input[..h].to_vec();

        let mut d_dur_act = vec![0.0; h];
        self.duration2.backward(&tr.dur_act, &[d_log_duration], &mut grad.duration2, Some(&mut d_dur_act));
        let d_dur_pre: Vec<f64> = d_dur_act.iter().zip(&tr.dur_pre).map(|(d, p)| d * gelu_grad(*p)).collect();
        self.duration1.backward(&tr.enc, &d_dur_pre, &mut grad.duration1, Some(&mut d_enc));

        let d_pre2: Vec<f64> = d_enc.iter().zip(&tr.pre2).map(|(d, p)| d * gelu_grad(*p)).collect();
        let mut d_act1 = vec![0.0; h];
        self.encoder2.backward(&tr.act1, &d_pre2, &mut grad.encoder2, Some(&mut d_act1));
        let d_pre1: Vec<f64> = d_act1.iter().zip(&tr.pre1).map(|(d, p)| d * gelu_grad(*p)).collect();
        let mut d_input = vec![0.0; tr.input.len()];
        self.encoder1.backward(&tr.input, &d_pre1, &mut grad.encoder1, Some(&mut d_input));
        let e = self.config.token_embed_dim;
        for (g, d) in grad.token_embedding[token * e..(token + 1) * e].iter_mut().zip(&d_input[..e]) {
            *g += d;
        }
    }

    /// Teacher-forced losses of one utterance; adds `scale * gradient` into `grad` when given.
    fn example_loss(&self, ex: &GenExample<'_>, scale: f64, mut grad: Option<&mut GenModel>) -> (f64, f64) {
        let accent = self.conditioning(&ex.accent);
        let t_total = ex.frames.n_frames() as f64;
        let d = self.frame_dim as f64;
        let k = ex.tokens.len() as f64;
        let w = self.config.duration_loss_weight;
        let (mut frame_loss, mut dur_loss) = (0.0, 0.0);
        let mut start = 0;
        for (&token, &dur) in ex.tokens.iter().zip(ex.durations) {
            let tr = self.trace_token(token, &accent, ex.speaker);
            let mut d_frame = vec![0.0; self.frame_dim];
            for t in start..start + dur {
                for ((g, y), x) in d_frame.iter_mut().zip(&tr.frame).zip(ex.frames.row(t)) {
                    let diff = y - x;
                    frame_loss += diff * diff / (t_total * d);
                    *g += 2.0 * diff / (t_total * d);
                }
            }
            start += dur;
            let err = tr.log_duration - (dur as f64).ln();
            dur_loss += err * err / k;
            if let Some(grad) = grad.as_deref_mut() {
                d_frame.iter_mut().for_each(|g| *g *= scale);
                let d_log = scale * w * 2.0 * err / k;
                self.backward_token(&tr, token, &d_frame, d_log, grad);
            }
        }
        (frame_loss, dur_loss)
    }

    /// First-layer encoder pre-activations, one row per token.
    pub fn encoder_preactivations(&self, tokens: &[usize], accent: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let accent = self.conditioning(accent);
        Ok(tokens
            .iter()
            .map(|&t| self.encoder1.forward(&self.token_input(t, &accent)))
            .collect())
    }

    /// First-layer duration-predictor pre-activations, one row per token.
    pub fn duration_preactivations(&self, tokens: &[usize], accent: &[f64]) -> Result<Vec<Vec<f64>>> {
        let dummy = vec![0.0; self.config.speaker_embed_dim];
        self.check_tokens(tokens)?;
        self.check_conditioning(accent, &dummy)?;
        let accent = self.conditioning(accent);
        Ok(tokens
            .iter()
            .map(|&t| self.trace_token(t, &accent, &dummy).dur_pre)
            .collect())
    }

    pub fn predict_log_durations(&self, tokens: &[usize], accent: &[f64]) -> Result<Vec<f64>> {
        let dummy = vec![0.0; self.config.speaker_embed_dim];
        self.check_tokens(tokens)?;
        self.check_conditioning(accent, &dummy)?;
        let accent = self.conditioning(accent);
        Ok(tokens
            .iter()
            .map(|&t| self.trace_token(t, &accent, &dummy).log_duration)
            .collect())
    }

    /// Encode, predict durations, upsample, decode.
    pub fn generate(&self, tokens: &[usize], accent: &[f64], speaker: &[f64]) -> Result<FrameMatrix> {
        self.check_tokens(tokens)?;
        self.check_conditioning(accent, speaker)?;
        let accent = self.conditioning(accent);
        let mut data = Vec::new();
        let mut n_frames = 0;
        for &t in tokens {
            let tr = self.trace_token(t, &accent, speaker);
            let dur = durations_from_log(&[tr.log_duration])[0];
            for _ in 0..dur {
                data.extend_from_slice(&tr.frame);
            }
            n_frames += dur;
        }
        FrameMatrix::new(n_frames, self.frame_dim, data)
    }

    /// Stored speaker vector of a training speaker.
    pub fn speaker_vector(&self, speaker: &str) -> Option<&[f64]> {
        let s = self.config.speaker_embed_dim;
        self.speakers
            .binary_search_by(|x| x.as_str().cmp(speaker))
            .ok()
            .map(|i| &self.speaker_table[i * s..(i + 1) * s])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = GenMeta {
            config: self.config.clone(),
            frame_dim: self.frame_dim,
            speakers: self.speakers.clone(),
            trained_accents: self.trained_accents.clone(),
        };
        checkpoint::encode("gen", serde_json::to_value(meta).expect("meta serializes"), &self.tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode(bytes, "gen")?;
        let meta: GenMeta = serde_json::from_value(header.config.clone())
            .map_err(|e| Error::validation("checkpoint config", e.to_string()))?;
        let table = vec![0.0; meta.speakers.len() * meta.config.speaker_embed_dim];
        let mut model = GenModel::new(meta.config, meta.frame_dim, meta.speakers, table, meta.trained_accents)?;
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

impl Parameters for GenModel {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            name: "token_embedding".into(),
            shape: vec![self.config.token_vocab, self.config.token_embed_dim],
            data: &self.token_embedding,
        }];
        out.extend(self.encoder1.tensors("encoder.layer1"));
        out.extend(self.encoder2.tensors("encoder.layer2"));
        out.extend(self.duration1.tensors("duration.layer1"));
        out.extend(self.duration2.tensors("duration.layer2"));
        out.extend(self.decoder1.tensors("decoder.layer1"));
        out.extend(self.decoder2.tensors("decoder.layer2"));
        out.push(TensorRef {
            name: "speaker_table".into(),
            shape: vec![self.speakers.len(), self.config.speaker_embed_dim],
            data: &self.speaker_table,
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.token_embedding];
        out.extend(self.encoder1.tensors_mut());
        out.extend(self.encoder2.tensors_mut());
        out.extend(self.duration1.tensors_mut());
        out.extend(self.duration2.tensors_mut());
        out.extend(self.decoder1.tensors_mut());
        out.extend(self.decoder2.tensors_mut());
        out.push(&mut self.speaker_table);
        out
    }
}

/// One teacher-forced training example.
pub struct GenExample<'a> {
    pub frames: &'a FrameMatrix,
    pub tokens: &'a [usize],
    pub durations: &'a [usize],
    pub accent: Vec<f64>,
    pub speaker: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLogEntry {
    pub step: usize,
    pub frame_mse: f64,
    pub duration_mse: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenTrainingLog {
    pub optimizer: String,
    pub entries: Vec<GenLogEntry>,
    /// Frame MSE over the whole training set before the first update.
    pub initial_reconstruction_mse: f64,
    pub final_reconstruction_mse: f64,
}

impl GenTrainingLog {
    pub fn to_json_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }
}

/// Mean frame MSE of teacher-forced reconstructions.
pub fn reconstruction_mse(model: &GenModel, examples: &[GenExample<'_>]) -> f64 {
    let sum: f64 = examples.iter().map(|ex| model.example_loss(ex, 1.0, None).0).sum();
    sum / examples.len().max(1) as f64
}

fn lookup_factors<'a>(factors: &'a FactorTable, utt_id: &str) -> Result<(&'a [usize], &'a [usize])> {
    let codes = factors.content_codes.get(utt_id).ok_or_else(|| Error::Unknown {
        kind: "content codes for utterance",
        id: utt_id.to_string(),
    })?;
    let durs = &factors.durations[utt_id];
    Ok((codes, durs))
}

/// Trains the generator on the training split minus the held-out accents.
///
/// The accent identifier and the probe are borrowed immutably and never updated.
pub fn train_generator(
    config: &GenConfig,
    corpus: &Corpus,
    factors: &FactorTable,
    split: &SplitSet,
    aid: &AidModel,
    probe: &ProbeModel,
) -> Result<(GenModel, GenTrainingLog)> {
    config.validate()?;
    if config.accent_embed_dim != aid.accent_embed_dim() {
        return Err(Error::validation(
            "gen.accent_embed_dim",
            format!(
                "{} does not match the accent identifier's embedding width {}",
                config.accent_embed_dim,
                aid.accent_embed_dim()
            ),
        ));
    }
    if probe.input != ProbeInput::PooledFrames {
        return Err(Error::validation("probe", "generator speaker vectors need a pooled-frame probe"));
    }
    if config.speaker_embed_dim != probe.config.probe_dim {
        return Err(Error::validation(
            "gen.speaker_embed_dim",
            format!("{} does not match probe width {}", config.speaker_embed_dim, probe.config.probe_dim),
        ));
    }
    let mut config = config.clone();
    let vocab = factors.content_vocab();
    match config.token_vocab {
        0 => config.token_vocab = vocab,
        v if v < vocab => {
            return Err(Error::validation(
                "gen.token_vocab",
                format!("{v} is smaller than the corpus content vocabulary {vocab}"),
            ))
        }
        _ => {}
    }
    for held in &config.held_out_accents {
        if !split.eligible_accents.contains(held) {
            return Err(Error::Unknown {
                kind: "held-out accent",
                id: held.clone(),
            });
        }
    }

    let mut ids = Vec::new();
    for id in &split.train {
        if !config.held_out_accents.contains(&corpus.get(id)?.accent_label) {
            ids.push(id.clone());
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptySplit("no generator training utterances after hold-out".into()));
    }
    let trained_accents: Vec<String> = split
        .eligible_accents
        .iter()
        .filter(|a| !config.held_out_accents.contains(a))
        .cloned()
        .collect();

    // Speaker table: mean probe representation over each speaker's training utterances.
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for id in &ids {
        let utt = corpus.get(id)?;
        let z = probe.embed_utterance(utt)?;
        let entry = sums
            .entry(utt.speaker_id.clone())
            .or_insert_with(|| (vec![0.0; z.len()], 0));
        entry.0.iter_mut().zip(&z).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    let speakers: Vec<String> = sums.keys().cloned().collect();
    let table: Vec<f64> = sums
        .values()
        .flat_map(|(s, n)| s.iter().map(move |v| v / *n as f64))
        .collect();

    let mut model = GenModel::new(config.clone(), corpus.dim(), speakers, table, trained_accents)?;
    let speaker_vectors: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            let spk = &corpus.get(id)?.speaker_id;
            Ok(model.speaker_vector(spk).expect("speaker in table").to_vec())
        })
        .collect::<Result<_>>()?;
    let mut examples = Vec::with_capacity(ids.len());
    for (id, spk) in ids.iter().zip(&speaker_vectors) {
        let utt = corpus.get(id)?;
        let (tokens, durations) = lookup_factors(factors, id)?;
        if durations.iter().sum::<usize>() != utt.frames.n_frames() {
            return Err(Error::validation(
                format!("factors.durations[{id}]"),
                "durations do not cover the utterance",
            ));
        }
        examples.push(GenExample {
            frames: &utt.frames,
            tokens,
            durations,
            accent: extract_accent_embedding(aid, utt)?,
            speaker: spk,
        });
    }

    let mut optimizer = Adam::new(config.learning_rate);
    let mut log = GenTrainingLog {
        optimizer: optimizer.describe(),
        entries: Vec::new(),
        initial_reconstruction_mse: reconstruction_mse(&model, &examples),
        final_reconstruction_mse: f64::NAN,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut grad = model.zeros_like();
    let scale = 1.0 / config.batch_size as f64;
    let silent = vec![0.0; config.speaker_embed_dim];
    for step in 1..=config.max_steps {
        grad.zero();
        let (mut frame_mse, mut duration_mse) = (0.0, 0.0);
        for _ in 0..config.batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            let dropped;
            let ex = if config.speaker_dropout > 0.0 && rng.random_bool(config.speaker_dropout) {
                dropped = GenExample {
                    frames: ex.frames,
                    tokens: ex.tokens,
                    durations: ex.durations,
                    accent: ex.accent.clone(),
                    speaker: &silent,
                };
                &dropped
            } else {
                ex
            };
            let (f, d) = model.example_loss(ex, scale, Some(&mut grad));
            frame_mse += f * scale;
            duration_mse += d * scale;
        }
        // The speaker table is fixed conditioning, not a trained parameter.
        grad.speaker_table.fill(0.0);
        let total = frame_mse + config.duration_loss_weight * duration_mse;
        if !total.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("frame_mse={frame_mse}, duration_mse={duration_mse}"),
            });
        }
        optimizer.step(&mut model, &grad);
        log.entries.push(GenLogEntry {
            step,
            frame_mse,
            duration_mse,
            total,
        });
    }
    log.final_reconstruction_mse = reconstruction_mse(&model, &examples);
    Ok((model, log))
}

/// Per-token integer durations predicted for `tokens` under an accent embedding.
pub fn predict_durations(model: &GenModel, tokens: &[usize], accent_embed: &[f64]) -> Result<Vec<usize>> {
    Ok(durations_from_log(&model.predict_log_durations(tokens, accent_embed)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    Inherent,
    Cross,
    Unseen,
}

impl ScenarioMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioMode::Inherent => "inherent",
            ScenarioMode::Cross => "cross",
            ScenarioMode::Unseen => "unseen",
        }
    }
}

/// One synthesis request: whose voice, whose accent, which tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: ScenarioMode,
    pub speaker_ref: String,
    pub accent_ref: String,
    pub tokens: Vec<usize>,
}

impl Scenario {
    /// Checks the mode's typing rules against the corpus and the generator's training accents.
    pub fn validate(&self, corpus: &Corpus, model: &GenModel) -> Result<()> {
        model.check_tokens(&self.tokens)?;
        let spk_utt = corpus.get(&self.speaker_ref)?;
        let acc_utt = corpus.get(&self.accent_ref)?;
        let target_trained = model.trained_accents.contains(&acc_utt.accent_label);
        let fail = |reason: String| Err(Error::validation(format!("{} scenario", self.mode.as_str()), reason));
        match self.mode {
            ScenarioMode::Inherent => {
                if self.speaker_ref != self.accent_ref {
                    return fail("speaker and accent references must be the same utterance".into());
                }
                if !target_trained {
                    return fail(format!("accent {} was not seen in generator training", acc_utt.accent_label));
                }
            }
            ScenarioMode::Cross => {
                if spk_utt.accent_label == acc_utt.accent_label {
                    return fail(format!("both references have accent {}", acc_utt.accent_label));
                }
                if !target_trained {
                    return fail(format!("accent {} was not seen in generator training", acc_utt.accent_label));
                }
            }
            ScenarioMode::Unseen => {
                if target_trained {
                    return fail(format!("accent {} was used in generator training", acc_utt.accent_label));
                }
                if spk_utt.accent_label != acc_utt.accent_label {
                    return fail("speaker and accent references must share the accent".into());
                }
            }
        }
        Ok(())
    }
}

/// Generates frames for a scenario. Speakers outside the generator's table need the probe.
pub fn synthesize(
    model: &GenModel,
    scenario: &Scenario,
    corpus: &Corpus,
    aid: &AidModel,
    probe: Option<&ProbeModel>,
) -> Result<UtteranceRecord> {
    scenario.validate(corpus, model)?;
    let spk_utt = corpus.get(&scenario.speaker_ref)?;
    let acc_utt = corpus.get(&scenario.accent_ref)?;
    let accent = extract_accent_embedding(aid, acc_utt)?;
    let speaker = match model.speaker_vector(&spk_utt.speaker_id) {
        Some(v) => v.to_vec(),
        None => match probe {
            Some(p) => p.embed_utterance(spk_utt)?,
            None => {
                return Err(Error::Unsupported(format!(
                    "speaker {} is not a training speaker; train a speaker probe to embed it",
                    spk_utt.speaker_id
                )))
            }
        },
    };
    let frames = model.generate(&scenario.tokens, &accent, &speaker)?;
    Ok(UtteranceRecord {
        utt_id: format!(
            "gen:{}:{}:{}",
            scenario.mode.as_str(),
            scenario.speaker_ref,
            scenario.accent_ref
        ),
        speaker_id: spk_utt.speaker_id.clone(),
        accent_label: acc_utt.accent_label.clone(),
        frames,
        sample_period_ms: spk_utt.sample_period_ms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Token sequences ("sentences") rendered for every reference.
    pub sentences: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Accent references paired with each speaker reference in cross mode.
    pub cross_targets_per_speaker: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            sentences: 8,
            min_tokens: 5,
            max_tokens: 9,
            cross_targets_per_speaker: 3,
            seed: 0,
        }
    }
}

/// Inherent, cross and unseen scenarios over the unseen-speaker test set, with one fixed
/// reference utterance per speaker.
pub fn build_scenarios(corpus: &Corpus, split: &SplitSet, model: &GenModel, config: &ScenarioConfig) -> Result<Vec<Scenario>> {
    if config.min_tokens == 0 || config.max_tokens < config.min_tokens {
        return Err(Error::validation("scenarios.min_tokens", "need 1 <= min_tokens <= max_tokens"));
    }
    let mut refs: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    for id in &split.test_unseen {
        let utt = corpus.get(id)?;
        let e = refs.entry(&utt.speaker_id).or_insert((id.as_str(), utt.accent_label.as_str()));
        if id.as_str() < e.0 {
            e.0 = id;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sentences: Vec<Vec<usize>> = (0..config.sentences)
        .map(|_| {
            let n = rng.random_range(config.min_tokens..=config.max_tokens);
            (0..n).map(|_| rng.random_range(0..model.config.token_vocab)).collect()
        })
        .collect();
    let trained: BTreeSet<&str> = model.trained_accents.iter().map(String::as_str).collect();

    let mut out = Vec::new();
    for (ref_utt, accent) in refs.values() {
        let mode = if trained.contains(accent) {
            ScenarioMode::Inherent
        } else {
            ScenarioMode::Unseen
        };
        for tokens in &sentences {
            out.push(Scenario {
                mode,
                speaker_ref: ref_utt.to_string(),
                accent_ref: ref_utt.to_string(),
                tokens: tokens.clone(),
            });
        }
    }
    for (ref_utt, accent) in refs.values() {
        if !trained.contains(accent) {
            continue;
        }
        let mut targets: Vec<&str> = refs
            .values()
            .filter(|(_, a)| a != accent && trained.contains(a))
            .map(|(u, _)| *u)
            .collect();
        targets.shuffle(&mut rng);
        for target in targets.into_iter().take(config.cross_targets_per_speaker) {
            for tokens in &sentences {
                out.push(Scenario {
                    mode: ScenarioMode::Cross,
                    speaker_ref: ref_utt.to_string(),
                    accent_ref: target.to_string(),
                    tokens: tokens.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Aggregate scores of one inference mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub n: usize,
    /// Mean AccCos under each scorer, in scorer order.
    pub acc_cos: Vec<f64>,
    pub spk_cos: f64,
    /// Fraction of outputs whose predicted accent is the target accent, per scorer.
    pub target_accent_rate: Vec<f64>,
    /// Predicted-accent histogram under the first scorer.
    pub predicted_accents: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub modes: BTreeMap<ScenarioMode, ModeReport>,
}

impl GenReport {
    /// Cross-mode target-accent rate under the given scorer.
    pub fn conversion_rate(&self, scorer: usize) -> Option<f64> {
        self.modes
            .get(&ScenarioMode::Cross)
            .and_then(|m| m.target_accent_rate.get(scorer).copied())
    }
}

/// Scores already-generated outputs against their scenarios.
pub fn score_outputs(
    scorers: &[&AidModel],
    probe: &ProbeModel,
    scenarios: &[Scenario],
    outputs: &[UtteranceRecord],
    corpus: &Corpus,
) -> Result<GenReport> {
    if scenarios.len() != outputs.len() {
        return Err(Error::shape("generated outputs", scenarios.len(), outputs.len()));
    }
    if scorers.is_empty() {
        return Err(Error::validation("scorers", "need at least one accent identifier"));
    }
    struct Acc {
        n: usize,
        acc: Vec<f64>,
        spk: f64,
        hits: Vec<usize>,
        hist: BTreeMap<String, usize>,
    }
    let mut per_mode: BTreeMap<ScenarioMode, Acc> = BTreeMap::new();
    for (scenario, out) in scenarios.iter().zip(outputs) {
        let spk_ref = corpus.get(&scenario.speaker_ref)?;
        let acc_ref = corpus.get(&scenario.accent_ref)?;
        let a = per_mode.entry(scenario.mode).or_insert_with(|| Acc {
            n: 0,
            acc: vec![0.0; scorers.len()],
            spk: 0.0,
            hits: vec![0; scorers.len()],
            hist: BTreeMap::new(),
        });
        a.n += 1;
        for (i, scorer) in scorers.iter().enumerate() {
            a.acc[i] += acc_cos(scorer, out, acc_ref)?;
            let predicted = &scorer.accents[predict_accent(scorer, out)?];
            if *predicted == acc_ref.accent_label {
                a.hits[i] += 1;
            }
            if i == 0 {
                *a.hist.entry(predicted.clone()).or_default() += 1;
            }
        }
        a.spk += spk_cos(probe, out, spk_ref)?;
    }
    let modes = per_mode
        .into_iter()
        .map(|(mode, a)| {
            let n = a.n as f64;
            (
                mode,
                ModeReport {
                    n: a.n,
                    acc_cos: a.acc.iter().map(|v| v / n).collect(),
                    spk_cos: a.spk / n,
                    target_accent_rate: a.hits.iter().map(|&h| h as f64 / n).collect(),
                    predicted_accents: a.hist,
                },
            )
        })
        .collect();
    Ok(GenReport { modes })
}

/// Synthesizes every scenario and scores the outputs.
///
/// `aid` conditions the generator; `scorers` (two independently trained identifiers in the
/// standard harness) measure accent similarity and predicted accent.
pub fn evaluate_generation(
    model: &GenModel,
    aid: &AidModel,
    scorers: &[&AidModel],
    probe: &ProbeModel,
    scenarios: &[Scenario],
    corpus: &Corpus,
) -> Result<(GenReport, Vec<UtteranceRecord>)> {
    let outputs = scenarios
        .iter()
        .map(|s| synthesize(model, s, corpus, aid, Some(probe)))
        .collect::<Result<Vec<_>>>()?;
    Ok((score_outputs(scorers, probe, scenarios, &outputs, corpus)?, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(zero_accent: bool) -> GenModel {
        let config = GenConfig {
            token_vocab: 4,
            token_embed_dim: 3,
            accent_embed_dim: 2,
            speaker_embed_dim: 2,
            decoder_hidden: 5,
            zero_accent,
            ..GenConfig::default()
        };
        GenModel::new(config, 3, vec!["s0".into()], vec![0.3, -0.2], vec!["a".into()]).unwrap()
    }

    #[test]
    fn log_duration_rounding() {
        let d = durations_from_log(&[0.0, 0.0, 2f64.ln()]);
        assert_eq!(d, vec![1, 1, 2]);
        assert_eq!(d.iter().sum::<usize>(), 4);
        assert_eq!(durations_from_log(&[-5.0]), vec![1]);
    }

    #[test]
    fn accent_conditioning_is_live() {
        let model = tiny(false);
        let tokens = [0, 3, 1];
        let accent = [0.7, -0.4];
        let zeros = [0.0, 0.0];
        assert_ne!(
            model.encoder_preactivations(&tokens, &accent).unwrap(),
            model.encoder_preactivations(&tokens, &zeros).unwrap()
        );
        assert_ne!(
            model.duration_preactivations(&tokens, &accent).unwrap(),
            model.duration_preactivations(&tokens, &zeros).unwrap()
        );
        let ablated = tiny(true);
        assert_eq!(
            ablated.encoder_preactivations(&tokens, &accent).unwrap(),
            ablated.encoder_preactivations(&tokens, &zeros).unwrap()
        );
    }

    #[test]
    fn token_checks() {
        let model = tiny(false);
        assert!(predict_durations(&model, &[], &[0.0, 0.0]).is_err());
        assert!(predict_durations(&model, &[4], &[0.0, 0.0]).is_err());
        assert!(predict_durations(&model, &[0], &[0.0]).is_err());
    }

    #[test]
    fn generation_length_matches_durations() {
        let model = tiny(false);
        let tokens = [2, 0, 1, 1];
        let accent = [0.1, 0.2];
        let durs = predict_durations(&model, &tokens, &accent).unwrap();
        let frames = model.generate(&tokens, &accent, &[0.3, -0.2]).unwrap();
        assert_eq!(frames.n_frames(), durs.iter().sum::<usize>());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny(false);
        let frames = FrameMatrix::new(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let speaker = [0.3, -0.2];
        let ex = GenExample {
            frames: &frames,
            tokens: &[1, 3],
            durations: &[2, 3],
            accent: vec![0.5, -0.8],
            speaker: &speaker,
        };
        let loss = |m: &GenModel| {
            let (f, d) = m.example_loss(&ex, 1.0, None);
            f + m.config.duration_loss_weight * d
        };
        let mut grad = model.zeros_like();
        model.example_loss(&ex, 1.0, Some(&mut grad));
        let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
        let n = analytic.len() - speaker.len();
        let h = 1e-6;
        for i in (0..n).step_by(3) {
            let mut plus = model.clone();
            let mut minus = model.clone();
            bump(&mut plus, i, h);
            bump(&mut minus, i, -h);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!((fd - analytic[i]).abs() / denom < 1e-5, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    fn bump(model: &mut GenModel, mut index: usize, delta: f64) {
        for t in model.tensors_mut() {
            if index < t.len() {
                t[index] += delta;
                return;
            }
            index -= t.len();
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny(false);
        assert_eq!(GenModel::from_bytes(&model.to_bytes()).unwrap(), model);
    }
}
