use std::fs;

use accentkit_core::corpus::{load_manifest, save_manifest, FrameMatrix, UtteranceRecord, MANIFEST_FILE};
use accentkit_core::{generate_corpus, CorpusSpec, Error};
use proptest::prelude::*;

fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_accents: 2,
        speakers_per_accent: 4,
        utts_per_speaker: 3,
        feature_dim: 8,
        seed,
        ..CorpusSpec::default()
    }
}

/// Independent evaluation of tanh(W_a a + W_s s + W_c c + b).
fn oracle_frame(w: [&[f64]; 3], x: [&[f64]; 3], bias: &[f64]) -> Vec<f64> {
    let d = bias.len();
    (0..d)
        .map(|i| {
            let mut z = bias[i];
            for (wm, v) in w.iter().zip(x.iter()) {
                let cols = v.len();
                for j in 0..cols {
                    z += wm[i * cols + j] * v[j];
                }
            }
            z.tanh()
        })
        .collect()
}

#[test]
fn noise_free_frames_match_closed_form() {
    let spec = CorpusSpec {
        noise_sigma: 0.0,
        ..small_spec(11)
    };
    let (records, f) = generate_corpus(&spec).unwrap();
    let mut worst: f64 = 0.0;
    for r in &records {
        let codes = &f.content_codes[&r.utt_id];
        let durs = &f.durations[&r.utt_id];
        assert_eq!(durs.iter().sum::<usize>(), r.frames.n_frames());
        let mut t = 0;
        for (&code, &dur) in codes.iter().zip(durs) {
            assert!((2..=6).contains(&dur));
            let expected = oracle_frame(
                [&f.w_accent, &f.w_speaker, &f.w_content],
                [
                    &f.accent_vectors[&r.accent_label],
                    &f.speaker_vectors[&r.speaker_id],
                    &f.content_vectors[code],
                ],
                &f.bias,
            );
            for _ in 0..dur {
                for (a, b) in r.frames.row(t).iter().zip(&expected) {
                    worst = worst.max((a - b).abs());
                }
                t += 1;
            }
        }
    }
    assert!(worst < 1e-12, "max deviation {worst}");
}

#[test]
fn identical_factors_give_identical_frames() {
    let spec = CorpusSpec {
        noise_sigma: 0.0,
        utts_per_speaker: 40,
        content_vocab: 2,
        frames_per_utt_range: [2, 7],
        ..small_spec(3)
    };
    let (records, f) = generate_corpus(&spec).unwrap();
    let mut matched = 0;
    for (i, a) in records.iter().enumerate() {
        for b in &records[i + 1..] {
            if a.speaker_id == b.speaker_id
                && f.content_codes[&a.utt_id] == f.content_codes[&b.utt_id]
                && f.durations[&a.utt_id] == f.durations[&b.utt_id]
            {
                assert_eq!(a.frames, b.frames);
                matched += 1;
            }
        }
    }
    assert!(matched > 0, "corpus produced no repeated factor combinations");
}

#[test]
fn generation_is_deterministic() {
    let (a, fa) = generate_corpus(&small_spec(7)).unwrap();
    let (b, fb) = generate_corpus(&small_spec(7)).unwrap();
    assert_eq!(a, b);
    assert_eq!(fa, fb);
    assert_eq!(a.len(), 24);
    assert!(a.iter().all(|r| r.frames.dim() == 8 && r.frames.data().iter().all(|v| v.is_finite())));
    let (c, _) = generate_corpus(&small_spec(8)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn round_trip_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = generate_corpus(&small_spec(1)).unwrap();
    let path = save_manifest(&records, dir.path()).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded, records);
    for (a, b) in loaded.iter().zip(&records) {
        assert!(a.frames.data().iter().zip(b.frames.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn empty_manifest_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let path = save_manifest(&[], dir.path()).unwrap();
    assert!(load_manifest(&path).unwrap().is_empty());
}

fn three_line_manifest(dir: &std::path::Path) -> std::path::PathBuf {
    let (records, _) = generate_corpus(&small_spec(2)).unwrap();
    save_manifest(&records[..3], dir).unwrap()
}

#[test]
fn three_line_manifest_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = three_line_manifest(dir.path());
    let ids: Vec<String> = load_manifest(&path).unwrap().into_iter().map(|r| r.utt_id).collect();
    assert_eq!(ids, ["acc00-spk00-u000", "acc00-spk00-u001", "acc00-spk00-u002"]);
}

#[test]
fn missing_field_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = three_line_manifest(dir.path());
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut obj: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    obj.as_object_mut().unwrap().remove("accent_label");
    lines[2] = obj.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_manifest(&path) {
        Err(Error::Parse { line, reason, .. }) => {
            assert_eq!(line, 3);
            assert!(reason.contains("accent_label"), "{reason}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn garbage_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = three_line_manifest(dir.path());
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    fs::write(&path, text).unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 5, .. })));
}

#[test]
fn missing_blob_names_the_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let path = three_line_manifest(dir.path());
    for entry in fs::read_dir(dir.path()).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap() != MANIFEST_FILE {
            fs::remove_file(p).unwrap();
        }
    }
    match load_manifest(&path) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("acc00-spk00-u000"), "{e}"),
        other => panic!("expected I/O error, got {other:?}"),
    }
}

#[test]
fn duplicate_ids_rejected_on_save() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = generate_corpus(&small_spec(2)).unwrap();
    let dup = vec![records[0].clone(), records[0].clone()];
    assert!(matches!(save_manifest(&dup, dir.path()), Err(Error::Validation { .. })));
}

fn arb_record(index: usize) -> impl Strategy<Value = UtteranceRecord> {
    (1usize..6, 1usize..5, any::<u64>(), 0.5f64..50.0).prop_flat_map(move |(t, d, salt, period)| {
        proptest::collection::vec(-1e6f64..1e6, t * d).prop_map(move |data| UtteranceRecord {
            utt_id: format!("u{index}-{salt}"),
            speaker_id: format!("s{}", salt % 3),
            accent_label: format!("a{}", salt % 2),
            frames: FrameMatrix::new(t, d, data).unwrap(),
            sample_period_ms: period,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trip_is_bit_exact(dim in 1usize..5, n in 0usize..6, seed in any::<u64>()) {
        let records: Vec<UtteranceRecord> = (0..n)
            .map(|i| {
                let t = 1 + (seed as usize).wrapping_add(i) % 7;
                let data = (0..t * dim)
                    .map(|k| f64::from_bits((seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)) & 0x3fff_ffff_ffff_ffff))
                    .collect();
                UtteranceRecord {
                    utt_id: format!("u{i}"),
                    speaker_id: format!("s{}", i % 2),
                    accent_label: "a".into(),
                    frames: FrameMatrix::new(t, dim, data).unwrap(),
                    sample_period_ms: 10.0,
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = save_manifest(&records, dir.path()).unwrap();
        prop_assert_eq!(load_manifest(&path).unwrap(), records);
    }

    #[test]
    fn arbitrary_records_round_trip(r0 in arb_record(0), r1 in arb_record(1)) {
        let records = if r0.frames.dim() == r1.frames.dim() { vec![r0, r1] } else { vec![r0] };
        let dir = tempfile::tempdir().unwrap();
        let path = save_manifest(&records, dir.path()).unwrap();
        let loaded = load_manifest(&path).unwrap();
        prop_assert_eq!(loaded.len(), records.len());
        for (a, b) in loaded.iter().zip(&records) {
            prop_assert_eq!(a, b);
        }
    }
}
