//! Utterance data model, synthetic factorized corpus and manifest persistence.
//!
//! Synthetic frames follow `x_t = tanh(W_a a + W_s s + W_c c_code(t) + b) + noise`, so the
//! accent, speaker and content factors behind every frame are known exactly and can be
//! used to check what the downstream models retain.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::error::{Error, Result};

/// Shortest run of frames a content code occupies.
pub const MIN_SEGMENT_FRAMES: usize = 2;
/// Longest run of frames a content code occupies.
pub const MAX_SEGMENT_FRAMES: usize = 6;

pub const MANIFEST_FORMAT: &str = "aidcorpus";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FRAMES_BLOB: &str = "frames.bin";

const DEFAULT_SAMPLE_PERIOD_MS: f64 = 10.0;

/// Row-major `n_frames × dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    n_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FrameMatrix {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_frames * dim {
            return Err(Error::shape("frame data", n_frames * dim, data.len()));
        }
        Ok(Self { n_frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::shape("frame row", dim, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            n_frames: rows.len(),
            dim,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.n_frames)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Per-dimension mean over frames.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.n_frames.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Root mean square over every entry.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }
}

/// One utterance: its frames plus speaker and accent labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub accent_label: String,
    pub frames: FrameMatrix,
    /// Nominal frame spacing; informational only.
    pub sample_period_ms: f64,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frames.n_frames() == 0 {
            return Err(Error::validation(
                format!("{}.frames", self.utt_id),
                "utterance needs at least one frame",
            ));
        }
        if self.frames.dim() == 0 {
            return Err(Error::validation(format!("{}.frames", self.utt_id), "zero feature dimension"));
        }
        if let Some(bad) = self.frames.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                format!("{}.frames", self.utt_id),
                format!("non-finite value at flat index {bad}"),
            ));
        }
        if !(self.sample_period_ms > 0.0 && self.sample_period_ms.is_finite()) {
            return Err(Error::validation(
                format!("{}.sample_period_ms", self.utt_id),
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_accents: usize,
    pub speakers_per_accent: usize,
    pub utts_per_speaker: usize,
    /// Inclusive `[min, max]` utterance length in frames.
    pub frames_per_utt_range: [usize; 2],
    pub feature_dim: usize,
    pub accent_dim: usize,
    pub speaker_dim: usize,
    pub content_dim: usize,
    /// Number of distinct content codes (the generator's token vocabulary).
    pub content_vocab: usize,
    pub noise_sigma: f64,
    /// Scale of each factor's contribution to the pre-activation.
    pub accent_gain: f64,
    pub speaker_gain: f64,
    pub content_gain: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_accents: 8,
            speakers_per_accent: 12,
            utts_per_speaker: 10,
            frames_per_utt_range: [16, 40],
            feature_dim: 16,
            accent_dim: 4,
            speaker_dim: 8,
            content_dim: 4,
            content_vocab: 12,
            noise_sigma: 0.05,
            accent_gain: 1.0,
            speaker_gain: 0.7,
            content_gain: 0.5,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_accents < 2 {
            return Err(Error::validation("corpus.n_accents", "need at least 2 accents"));
        }
        if self.speakers_per_accent < 4 {
            return Err(Error::validation(
                "corpus.speakers_per_accent",
                "need at least 4 speakers per accent so unseen speakers can be reserved",
            ));
        }
        for (name, v) in [
            ("corpus.utts_per_speaker", self.utts_per_speaker),
            ("corpus.feature_dim", self.feature_dim),
            ("corpus.accent_dim", self.accent_dim),
            ("corpus.speaker_dim", self.speaker_dim),
            ("corpus.content_dim", self.content_dim),
            ("corpus.content_vocab", self.content_vocab),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        let [lo, hi] = self.frames_per_utt_range;
        if lo < MIN_SEGMENT_FRAMES {
            return Err(Error::validation(
                "corpus.frames_per_utt_range",
                format!("minimum must be at least {MIN_SEGMENT_FRAMES}"),
            ));
        }
        if hi < lo + (MAX_SEGMENT_FRAMES - 1) {
            return Err(Error::validation(
                "corpus.frames_per_utt_range",
                format!("range must span at least {} frames", MAX_SEGMENT_FRAMES - 1),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("corpus.noise_sigma", "must be a finite non-negative number"));
        }
        for (name, g) in [
            ("corpus.accent_gain", self.accent_gain),
            ("corpus.speaker_gain", self.speaker_gain),
            ("corpus.content_gain", self.content_gain),
        ] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::validation(name, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    pub fn n_utterances(&self) -> usize {
        self.n_accents * self.speakers_per_accent * self.utts_per_speaker
    }
}

/// Latent factors behind a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub feature_dim: usize,
    pub accent_dim: usize,
    pub speaker_dim: usize,
    pub content_dim: usize,
    pub accent_vectors: BTreeMap<String, Vec<f64>>,
    pub speaker_vectors: BTreeMap<String, Vec<f64>>,
    /// Row `k` is the content vector of code `k`.
    pub content_vectors: Vec<Vec<f64>>,
    /// Content code of every segment, per utterance.
    pub content_codes: BTreeMap<String, Vec<usize>>,
    /// Frames spanned by every segment, per utterance; parallel to `content_codes`.
    pub durations: BTreeMap<String, Vec<usize>>,
    /// Typical run length of each content code under each accent.
    pub accent_durations: BTreeMap<String, Vec<usize>>,
    /// Row-major `feature_dim × accent_dim`.
    pub w_accent: Vec<f64>,
    /// Row-major `feature_dim × speaker_dim`.
    pub w_speaker: Vec<f64>,
    /// Row-major `feature_dim × content_dim`.
    pub w_content: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FactorTable {
    /// Noise-free frame for one (accent, speaker, content code) triple.
    pub fn clean_frame(&self, accent: &str, speaker: &str, code: usize) -> Result<Vec<f64>> {
        let a = self.accent_vectors.get(accent).ok_or_else(|| Error::Unknown {
            kind: "accent",
            id: accent.to_string(),
        })?;
        let s = self.speaker_vectors.get(speaker).ok_or_else(|| Error::Unknown {
            kind: "speaker",
            id: speaker.to_string(),
        })?;
        let c = self.content_vectors.get(code).ok_or_else(|| Error::Unknown {
            kind: "content code",
            id: code.to_string(),
        })?;
        let mut out = self.bias.clone();
        accumulate_matvec(&mut out, &self.w_accent, a);
        accumulate_matvec(&mut out, &self.w_speaker, s);
        accumulate_matvec(&mut out, &self.w_content, c);
        out.iter_mut().for_each(|v| *v = v.tanh());
        Ok(out)
    }

    pub fn content_vocab(&self) -> usize {
        self.content_vectors.len()
    }
}

fn accumulate_matvec(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn accent_name(k: usize) -> String {
    format!("acc{k:02}")
}

/// Generates the synthetic corpus and the factors that produced it.
///
/// Labels are `accNN`, `accNN-spkMM` and `accNN-spkMM-uKKK`, so lexicographic order matches
/// generation order.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vec<UtteranceRecord>, FactorTable)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    // Entries scaled so each factor's pre-activation contribution has variance gain².
    let w_accent = gaussian_vec(&mut rng, d * spec.accent_dim, spec.accent_gain / (spec.accent_dim as f64).sqrt());
    let w_speaker = gaussian_vec(&mut rng, d * spec.speaker_dim, spec.speaker_gain / (spec.speaker_dim as f64).sqrt());
    let w_content = gaussian_vec(&mut rng, d * spec.content_dim, spec.content_gain / (spec.content_dim as f64).sqrt());
    let bias = gaussian_vec(&mut rng, d, 0.1);

    let mut accent_vectors = BTreeMap::new();
    let mut accent_durations = BTreeMap::new();
    for k in 0..spec.n_accents {
        let name = accent_name(k);
        accent_vectors.insert(name.clone(), gaussian_vec(&mut rng, spec.accent_dim, 1.0));
        let profile = (0..spec.content_vocab)
            .map(|_| rng.random_range(MIN_SEGMENT_FRAMES..=MAX_SEGMENT_FRAMES))
            .collect();
        accent_durations.insert(name, profile);
    }
    let content_vectors: Vec<Vec<f64>> = (0..spec.content_vocab)
        .map(|_| gaussian_vec(&mut rng, spec.content_dim, 1.0))
        .collect();

    let mut table = FactorTable {
        feature_dim: d,
        accent_dim: spec.accent_dim,
        speaker_dim: spec.speaker_dim,
        content_dim: spec.content_dim,
        accent_vectors,
        speaker_vectors: BTreeMap::new(),
        content_vectors,
        content_codes: BTreeMap::new(),
        durations: BTreeMap::new(),
        accent_durations,
        w_accent,
        w_speaker,
        w_content,
        bias,
    };

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::validation("corpus.noise_sigma", e.to_string()))?;
    let [lo, hi] = spec.frames_per_utt_range;
    let mut records = Vec::with_capacity(spec.n_utterances());
    for k in 0..spec.n_accents {
        let accent = accent_name(k);
        for j in 0..spec.speakers_per_accent {
            let speaker = format!("{accent}-spk{j:02}");
            let s = gaussian_vec(&mut rng, spec.speaker_dim, 1.0);
            table.speaker_vectors.insert(speaker.clone(), s);
            for u in 0..spec.utts_per_speaker {
                let utt_id = format!("{speaker}-u{u:03}");
                // Overshoot past the target is at most MAX_SEGMENT_FRAMES - 1, so the total stays <= hi.
                let target = rng.random_range(lo..=hi - (MAX_SEGMENT_FRAMES - 1));
                let profile = &table.accent_durations[&accent];
                let mut codes = Vec::new();
                let mut durations = Vec::new();
                let mut total = 0;
                while total < target {
                    let code = rng.random_range(0..spec.content_vocab);
                    let jitter: i64 = match rng.random_range(0..4) {
                        0 => -1,
                        3 => 1,
                        _ => 0,
                    };
                    let dur = (profile[code] as i64 + jitter)
                        .clamp(MIN_SEGMENT_FRAMES as i64, MAX_SEGMENT_FRAMES as i64) as usize;
                    codes.push(code);
                    durations.push(dur);
                    total += dur;
                }
                let mut data = Vec::with_capacity(total * d);
                for (&code, &dur) in codes.iter().zip(&durations) {
                    let clean = table.clean_frame(&accent, &speaker, code)?;
                    for _ in 0..dur {
                        data.extend(clean.iter().map(|v| v + noise.sample(&mut rng)));
                    }
                }
                table.content_codes.insert(utt_id.clone(), codes);
                table.durations.insert(utt_id.clone(), durations);
                records.push(UtteranceRecord {
                    utt_id,
                    speaker_id: speaker.clone(),
                    accent_label: accent.clone(),
                    frames: FrameMatrix::new(total, d, data)?,
                    sample_period_ms: DEFAULT_SAMPLE_PERIOD_MS,
                });
            }
        }
    }
    Ok((records, table))
}

/// Indexed, validated set of utterances with globally unique `utt_id`s.
#[derive(Clone, Debug)]
pub struct Corpus {
    records: Vec<UtteranceRecord>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl Corpus {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.frames.dim());
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if r.frames.dim() != dim {
                return Err(Error::shape(format!("{} feature dim", r.utt_id), dim, r.frames.dim()));
            }
            if index.insert(r.utt_id.clone(), i).is_some() {
                return Err(Error::validation("utt_id", format!("duplicate utterance id '{}'", r.utt_id)));
            }
        }
        Ok(Self { records, index, dim })
    }

    pub fn get(&self, utt_id: &str) -> Result<&UtteranceRecord> {
        self.index
            .get(utt_id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::Unknown {
                kind: "utterance",
                id: utt_id.to_string(),
            })
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sorted distinct accent labels.
    pub fn accents(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.accent_label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    dim: usize,
    #[serde(default)]
    dtype: Dtype,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    utt_id: String,
    speaker_id: String,
    accent_label: String,
    n_frames: usize,
    dim: usize,
    blob: String,
    offset: usize,
    #[serde(default = "default_sample_period")]
    sample_period_ms: f64,
}

fn default_sample_period() -> f64 {
    DEFAULT_SAMPLE_PERIOD_MS
}

/// Writes `manifest.jsonl` and `frames.bin` into `dir`, returning the manifest path.
pub fn save_manifest(records: &[UtteranceRecord], dir: &Path) -> Result<PathBuf> {
    let dim = records.first().map_or(0, |r| r.frames.dim());
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if r.frames.dim() != dim {
            return Err(Error::shape(format!("{} feature dim", r.utt_id), dim, r.frames.dim()));
        }
        if !seen.insert((r.speaker_id.as_str(), r.utt_id.as_str())) {
            return Err(Error::validation(
                "records",
                format!("duplicate (speaker_id, utt_id) = ({}, {})", r.speaker_id, r.utt_id),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;

    let mut blob_bytes = Vec::new();
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        version: 1,
        dim,
        dtype: Dtype::F64,
    };
    out.push(serde_json::to_string(&header).expect("header serializes"));
    for r in records {
        let line = ManifestLine {
            utt_id: r.utt_id.clone(),
            speaker_id: r.speaker_id.clone(),
            accent_label: r.accent_label.clone(),
            n_frames: r.frames.n_frames(),
            dim: r.frames.dim(),
            blob: FRAMES_BLOB.to_string(),
            offset: blob_bytes.len(),
            sample_period_ms: r.sample_period_ms,
        };
        blob::push_f64s(&mut blob_bytes, r.frames.data());
        out.push(serde_json::to_string(&line).expect("line serializes"));
    }
    fs::write(dir.join(FRAMES_BLOB), &blob_bytes)
        .map_err(|e| Error::io(format!("writing {}", dir.join(FRAMES_BLOB).display()), e))?;
    let file = fs::File::create(&manifest_path)
        .map_err(|e| Error::io(format!("creating {}", manifest_path.display()), e))?;
    let mut w = BufWriter::new(file);
    for line in out {
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest_path)
}

/// Loads every record listed in a manifest, in file order.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(format!("reading {}", path.display()), e))?,
        None => return Err(parse_err(1, "missing header line".into())),
    };
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != MANIFEST_FORMAT || header.version != 1 {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }

    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if entry.dim != header.dim {
            return Err(parse_err(
                lineno,
                format!("dim {} disagrees with header dim {}", entry.dim, header.dim),
            ));
        }
        if !blobs.contains_key(&entry.blob) {
            let blob_path = base.join(&entry.blob);
            let bytes = fs::read(&blob_path).map_err(|e| {
                Error::io(
                    format!("blob {} for utt_id {}", blob_path.display(), entry.utt_id),
                    e,
                )
            })?;
            blobs.insert(entry.blob.clone(), bytes);
        }
        let data = blob::read_floats(&blobs[&entry.blob], entry.offset, entry.n_frames * entry.dim, header.dtype)
            .map_err(|e| parse_err(lineno, format!("utt_id {}: {e}", entry.utt_id)))?;
        records.push(UtteranceRecord {
            utt_id: entry.utt_id,
            speaker_id: entry.speaker_id,
            accent_label: entry.accent_label,
            frames: FrameMatrix::new(entry.n_frames, entry.dim, data)?,
            sample_period_ms: entry.sample_period_ms,
        });
    }
    Ok(records)
}

/// Writes a factor table as pretty JSON.
pub fn save_factors(table: &FactorTable, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(table).expect("factor table serializes");
    fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_factors(path: &Path) -> Result<FactorTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}
