use accentkit_core::augment::speed_length;
use accentkit_core::corpus::{FrameMatrix, UtteranceRecord};
use accentkit_core::{augment_batch, perturb_noise, perturb_speed, AugmentConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Smooth signal sampled at time `t`.
fn signal(t: f64, col: usize) -> f64 {
    1.2 + (0.07 * t + col as f64).sin() + 0.3 * (0.023 * t * (col + 1) as f64).cos()
}

fn smooth_utt(t: usize, d: usize) -> UtteranceRecord {
    let rows: Vec<Vec<f64>> = (0..t).map(|r| (0..d).map(|c| signal(r as f64, c)).collect()).collect();
    UtteranceRecord {
        utt_id: "u0".into(),
        speaker_id: "s0".into(),
        accent_label: "a0".into(),
        frames: FrameMatrix::from_rows(&rows).unwrap(),
        sample_period_ms: 10.0,
    }
}

/// Dense resampling of the underlying continuous signal at the stretched positions.
fn dense_oracle(t_in: usize, d: usize, factor: f64) -> Vec<Vec<f64>> {
    let t_out = ((t_in as f64 / factor).round() as usize).max(1);
    (0..t_out)
        .map(|t| {
            let pos = (t as f64 * factor).min((t_in - 1) as f64);
            (0..d).map(|c| signal(pos, c)).collect()
        })
        .collect()
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64).collect()
}

#[test]
fn speed_lengths() {
    assert_eq!(speed_length(100, 2.0), 50);
    assert_eq!(speed_length(100, 0.9), 111);
    assert_eq!(speed_length(100, 1.1), 91);
    assert_eq!(speed_length(1, 5.0), 1);
}

#[test]
fn speed_matches_dense_resampling() {
    for &factor in &[0.9, 1.1, 0.75, 1.6] {
        let utt = smooth_utt(100, 4);
        let out = perturb_speed(&utt, factor).unwrap();
        let oracle = dense_oracle(100, 4, factor);
        assert_eq!(out.frames.n_frames(), oracle.len());
        for (row, expected) in out.frames.rows().zip(&oracle) {
            for (a, b) in row.iter().zip(expected) {
                assert!((a - b).abs() < 2e-3, "factor {factor}: {a} vs {b}");
            }
        }
        let got = out.frames.column_means();
        let want = column_means(&oracle);
        let input = utt.frames.column_means();
        for c in 0..4 {
            assert!((got[c] - want[c]).abs() / want[c].abs() < 1e-3);
            if factor == 0.9 || factor == 1.1 {
                assert!((got[c] - input[c]).abs() / input[c].abs() < 0.02, "column {c} mean drifted");
            }
        }
        assert_eq!(out.speaker_id, utt.speaker_id);
        assert_eq!(out.accent_label, utt.accent_label);
    }
}

#[test]
fn unit_speed_is_identity() {
    let utt = smooth_utt(37, 3);
    assert_eq!(perturb_speed(&utt, 1.0).unwrap(), utt);
    assert!(perturb_speed(&utt, 0.0).is_err());
    assert!(perturb_speed(&utt, -1.0).is_err());
}

#[test]
fn noise_hits_requested_snr() {
    let utt = smooth_utt(400, 8);
    let signal_rms = utt.frames.rms();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &snr in &[0.0, 5.0, 10.0, 20.0, 30.0] {
        let out = perturb_noise(&utt, snr, &mut rng).unwrap();
        let noise: Vec<f64> = out.frames.data().iter().zip(utt.frames.data()).map(|(a, b)| a - b).collect();
        let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
        let measured = 20.0 * (signal_rms / noise_rms).log10();
        assert!((measured - snr).abs() < 0.5, "requested {snr} dB, measured {measured}");
    }
}

#[test]
fn infinite_snr_is_identity_and_silence_rejected() {
    let utt = smooth_utt(20, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(perturb_noise(&utt, f64::INFINITY, &mut rng).unwrap(), utt);
    let mut silent = utt.clone();
    silent.frames.data_mut().fill(0.0);
    assert!(perturb_noise(&silent, 10.0, &mut rng).is_err());
}

#[test]
fn noise_is_deterministic_given_rng_state() {
    let utt = smooth_utt(20, 2);
    let a = perturb_noise(&utt, 10.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = perturb_noise(&utt, 10.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_augmentation_respects_probability() {
    let batch: Vec<UtteranceRecord> = (0..400).map(|_| smooth_utt(30, 2)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let never = AugmentConfig {
        apply_prob: 0.0,
        ..AugmentConfig::default()
    };
    assert_eq!(augment_batch(&batch, &never, &mut rng).unwrap(), batch);
    let half = AugmentConfig::default();
    let out = augment_batch(&batch, &half, &mut rng).unwrap();
    let changed = out.iter().zip(&batch).filter(|(a, b)| a != b).count() as f64 / batch.len() as f64;
    // Unchanged outputs also arise when speed 1.0 meets an infinite SNR (1 in 12).
    let expected = 0.5 * (1.0 - 1.0 / 12.0);
    assert!((changed - expected).abs() < 0.08, "changed fraction {changed}");
}

proptest! {
    #[test]
    fn speed_output_length_and_bounds(t in 1usize..80, factor in 0.3f64..3.0) {
        let utt = smooth_utt(t, 2);
        let out = perturb_speed(&utt, factor).unwrap();
        prop_assert_eq!(out.frames.n_frames(), ((t as f64 / factor).round() as usize).max(1));
        // Linear interpolation never leaves the input's per-column range.
        for c in 0..2 {
            let col: Vec<f64> = utt.frames.rows().map(|r| r[c]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in out.frames.rows() {
                prop_assert!(r[c] >= lo - 1e-12 && r[c] <= hi + 1e-12);
            }
        }
    }
}
