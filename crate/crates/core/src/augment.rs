//! Feature-domain speed and noise perturbation for training batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{FrameMatrix, UtteranceRecord};
use crate::error::{Error, Result};

/// Augmentation settings. An SNR of `f64::INFINITY` (written `"none"` in config files) adds no noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub speed_factors: Vec<f64>,
    #[serde(with = "snr_list")]
    pub snr_db_choices: Vec<f64>,
    pub apply_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.9, 1.0, 1.1],
            snr_db_choices: vec![10.0, 15.0, 20.0, f64::INFINITY],
            apply_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which augmentation never changes a batch.
    pub fn identity() -> Self {
        Self {
            speed_factors: vec![1.0],
            snr_db_choices: vec![f64::INFINITY],
            apply_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.speed_factors.is_empty() {
            return Err(Error::validation("augment.speed_factors", "must not be empty"));
        }
        if let Some(f) = self.speed_factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return Err(Error::validation("augment.speed_factors", format!("factor {f} is not positive")));
        }
        if self.snr_db_choices.is_empty() {
            return Err(Error::validation("augment.snr_db_choices", "must not be empty"));
        }
        if self.snr_db_choices.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::validation("augment.snr_db_choices", "SNR must be a number or \"none\""));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::validation("augment.apply_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

mod snr_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Snr {
        Db(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        values
            .iter()
            .map(|v| if v.is_infinite() { Snr::Tag("none".into()) } else { Snr::Db(*v) })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Snr>::deserialize(d)?
            .into_iter()
            .map(|v| match v {
                Snr::Db(x) => Ok(x),
                Snr::Tag(t) if t == "none" || t == "inf" => Ok(f64::INFINITY),
                Snr::Tag(t) => Err(serde::de::Error::custom(format!("invalid SNR '{t}'"))),
            })
            .collect()
    }
}

/// Frame count after resampling by `factor`.
pub fn speed_length(n_frames: usize, factor: f64) -> usize {
    ((n_frames as f64 / factor).round() as usize).max(1)
}

/// Resamples the time axis by linear interpolation at positions `t' * factor`.
///
/// `factor > 1` shortens the utterance, `factor < 1` lengthens it.
pub fn perturb_speed(utt: &UtteranceRecord, factor: f64) -> Result<UtteranceRecord> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::validation("speed factor", format!("{factor} is not positive")));
    }
    utt.validate()?;
    if factor == 1.0 {
        return Ok(utt.clone());
    }
    let frames = &utt.frames;
    let t_in = frames.n_frames();
    let dim = frames.dim();
    let t_out = speed_length(t_in, factor);
    let last = (t_in - 1) as f64;
    let mut data = Vec::with_capacity(t_out * dim);
    for t in 0..t_out {
        let pos = (t as f64 * factor).min(last);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let a = frames.row(lo);
        if frac == 0.0 {
            data.extend_from_slice(a);
        } else {
            let b = frames.row((lo + 1).min(t_in - 1));
            data.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
        }
    }
    Ok(UtteranceRecord {
        frames: FrameMatrix::new(t_out, dim, data)?,
        ..utt.clone()
    })
}

/// Adds i.i.d. Gaussian noise whose RMS is `signal_rms / 10^(snr_db / 20)`.
pub fn perturb_noise(utt: &UtteranceRecord, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<UtteranceRecord> {
    let signal_rms = utt.frames.rms();
    if signal_rms <= 0.0 || !signal_rms.is_finite() {
        return Err(Error::validation(
            format!("{}.frames", utt.utt_id),
            "signal power is zero, SNR is undefined",
        ));
    }
    if snr_db.is_nan() {
        return Err(Error::validation("snr_db", "NaN"));
    }
    if snr_db == f64::INFINITY {
        return Ok(utt.clone());
    }
    let sigma = signal_rms / 10f64.powf(snr_db / 20.0);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::validation("snr_db", e.to_string()))?;
    let mut out = utt.clone();
    for v in out.frames.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

/// Perturbs each utterance independently with probability `apply_prob`.
///
/// A perturbed utterance gets a uniformly chosen speed factor followed by a uniformly chosen SNR.
pub fn augment_batch(
    batch: &[UtteranceRecord],
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<UtteranceRecord>> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::validation("batch", "must not be empty"));
    }
    batch
        .iter()
        .map(|utt| {
            if config.apply_prob == 0.0 || !rng.random_bool(config.apply_prob) {
                return Ok(utt.clone());
            }
            let factor = config.speed_factors[rng.random_range(0..config.speed_factors.len())];
            let snr = config.snr_db_choices[rng.random_range(0..config.snr_db_choices.len())];
            let sped = perturb_speed(utt, factor)?;
            perturb_noise(&sped, snr, rng)
        })
        .collect()
}
