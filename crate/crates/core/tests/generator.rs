use std::sync::OnceLock;

use accentkit_core::eval::train_frame_probe;
use accentkit_core::synthgen::{score_outputs, Scenario, ScenarioMode};
use accentkit_core::{
    build_splits, generate_corpus, predict_accent, predict_durations, synthesize, train_aid, train_generator, AidConfig,
    AidModel, AugmentConfig, Corpus, CorpusSpec, Error, FactorTable, GenConfig, GenModel, ProbeConfig, ProbeModel,
    SplitPolicy, SplitSet,
};

const HELD_OUT: &str = "acc07";

struct Fixture {
    corpus: Corpus,
    factors: FactorTable,
    split: SplitSet,
    aid: AidModel,
    aid_bytes_before: Vec<u8>,
    probe: ProbeModel,
    gen: GenModel,
    initial_mse: f64,
    final_mse: f64,
}

fn gen_config(aid: &AidModel) -> GenConfig {
    GenConfig {
        accent_embed_dim: aid.accent_embed_dim(),
        speaker_embed_dim: ProbeConfig::default().probe_dim,
        held_out_accents: vec![HELD_OUT.into()],
        ..GenConfig::default()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (records, factors) = generate_corpus(&CorpusSpec::default()).unwrap();
        let corpus = Corpus::new(records).unwrap();
        let split = build_splits(&corpus, &SplitPolicy::default()).unwrap();
        let (aid, _) = train_aid(&AidConfig::default(), &split, &corpus, &AugmentConfig::default()).unwrap();
        let aid_bytes_before = aid.to_bytes();
        let probe = train_frame_probe(&corpus, &split.train, &ProbeConfig::default()).unwrap();
        let (gen, log) = train_generator(&gen_config(&aid), &corpus, &factors, &split, &aid, &probe).unwrap();
        Fixture {
            initial_mse: log.initial_reconstruction_mse,
            final_mse: log.final_reconstruction_mse,
            corpus,
            factors,
            split,
            aid,
            aid_bytes_before,
            probe,
            gen,
        }
    })
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let f = fixture();
    let config = GenConfig {
        max_steps: 0,
        ..gen_config(&f.aid)
    };
    let (model, log) = train_generator(&config, &f.corpus, &f.factors, &f.split, &f.aid, &f.probe).unwrap();
    assert!(log.entries.is_empty());
    assert_eq!(log.initial_reconstruction_mse, log.final_reconstruction_mse);
    let (again, _) = train_generator(&config, &f.corpus, &f.factors, &f.split, &f.aid, &f.probe).unwrap();
    assert_eq!(model.to_bytes(), again.to_bytes());
}

#[test]
fn reconstruction_error_falls_tenfold() {
    let f = fixture();
    assert!(f.initial_mse >= 10.0 * f.final_mse, "{} -> {}", f.initial_mse, f.final_mse);
}

#[test]
fn accent_identifier_stays_frozen() {
    let f = fixture();
    assert_eq!(f.aid.to_bytes(), f.aid_bytes_before);
}

#[test]
fn held_out_accent_is_never_trained() {
    let f = fixture();
    assert!(!f.gen.trained_accents.iter().any(|a| a == HELD_OUT));
    assert_eq!(f.gen.trained_accents.len(), f.split.eligible_accents.len() - 1);
    for spk in &f.gen.speakers {
        let accent = f
            .corpus
            .records()
            .iter()
            .find(|r| &r.speaker_id == spk)
            .map(|r| r.accent_label.clone())
            .unwrap();
        assert_ne!(accent, HELD_OUT, "speaker {spk} of the held-out accent is in the table");
    }
}

fn first_test_unseen(f: &Fixture, accent: &str) -> String {
    f.split
        .test_unseen
        .iter()
        .find(|id| f.corpus.get(id).unwrap().accent_label == accent)
        .unwrap()
        .clone()
}

#[test]
fn scenario_typing_is_enforced() {
    let f = fixture();
    let a0 = first_test_unseen(f, "acc00");
    let a1 = first_test_unseen(f, "acc01");
    let held = first_test_unseen(f, HELD_OUT);
    let other_a0 = f
        .split
        .test_unseen
        .iter()
        .find(|id| {
            let r = f.corpus.get(id).unwrap();
            r.accent_label == "acc00" && r.speaker_id != f.corpus.get(&a0).unwrap().speaker_id
        })
        .unwrap()
        .clone();
    let s = |mode, spk: &str, acc: &str| Scenario {
        mode,
        speaker_ref: spk.into(),
        accent_ref: acc.into(),
        tokens: vec![1, 2, 3],
    };
    let bad = [
        s(ScenarioMode::Cross, &a0, &other_a0),
        s(ScenarioMode::Unseen, &a0, &a0),
        s(ScenarioMode::Inherent, &held, &held),
        s(ScenarioMode::Inherent, &a0, &other_a0),
        s(ScenarioMode::Cross, &a0, &held),
    ];
    for scenario in &bad {
        assert!(scenario.validate(&f.corpus, &f.gen).is_err(), "{scenario:?} accepted");
    }
    for scenario in [
        s(ScenarioMode::Cross, &a0, &a1),
        s(ScenarioMode::Unseen, &held, &held),
        s(ScenarioMode::Inherent, &a0, &a0),
    ] {
        scenario.validate(&f.corpus, &f.gen).unwrap();
    }
    let empty = Scenario {
        tokens: vec![],
        ..s(ScenarioMode::Inherent, &a0, &a0)
    };
    assert!(empty.validate(&f.corpus, &f.gen).is_err());
}

#[test]
fn unseen_speakers_need_a_probe() {
    let f = fixture();
    let a0 = first_test_unseen(f, "acc00");
    let scenario = Scenario {
        mode: ScenarioMode::Inherent,
        speaker_ref: a0.clone(),
        accent_ref: a0,
        tokens: vec![0, 1],
    };
    let err = synthesize(&f.gen, &scenario, &f.corpus, &f.aid, None).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
    assert!(err.to_string().contains("probe"));
    let a = synthesize(&f.gen, &scenario, &f.corpus, &f.aid, Some(&f.probe)).unwrap();
    let b = synthesize(&f.gen, &scenario, &f.corpus, &f.aid, Some(&f.probe)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.accent_label, "acc00");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn inherent_outputs_correlate_with_their_reference() {
    let f = fixture();
    let mut rs = Vec::new();
    for id in f.split.train.iter().filter(|id| f.corpus.get(id).unwrap().accent_label != HELD_OUT).step_by(7).take(30) {
        let reference = f.corpus.get(id).unwrap();
        let scenario = Scenario {
            mode: ScenarioMode::Inherent,
            speaker_ref: id.clone(),
            accent_ref: id.clone(),
            tokens: f.factors.content_codes[id].clone(),
        };
        let out = synthesize(&f.gen, &scenario, &f.corpus, &f.aid, Some(&f.probe)).unwrap();
        let t = out.frames.n_frames().min(reference.frames.n_frames());
        let d = reference.frames.dim();
        rs.push(pearson(&out.frames.data()[..t * d], &reference.frames.data()[..t * d]));
    }
    assert!(rs.len() >= 20);
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    assert!(mean > 0.0, "mean Pearson r {mean}");
}

#[test]
fn durations_beat_the_constant_mean() {
    let f = fixture();
    let train_durs: Vec<f64> = f
        .split
        .train
        .iter()
        .flat_map(|id| f.factors.durations[id].iter().map(|&d| d as f64))
        .collect();
    let mean = train_durs.iter().sum::<f64>() / train_durs.len() as f64;
    let (mut model_err, mut const_err, mut n) = (0.0, 0.0, 0usize);
    for id in &f.split.test_seen {
        let utt = f.corpus.get(id).unwrap();
        if utt.accent_label == HELD_OUT {
            continue;
        }
        let tokens = &f.factors.content_codes[id];
        let accent = accentkit_core::extract_accent_embedding(&f.aid, utt).unwrap();
        let predicted = predict_durations(&f.gen, tokens, &accent).unwrap();
        for (p, &t) in predicted.iter().zip(&f.factors.durations[id]) {
            model_err += (*p as f64 - t as f64).abs();
            const_err += (mean - t as f64).abs();
            n += 1;
        }
    }
    assert!(n > 100);
    assert!(model_err < const_err, "model MAE {} vs constant {}", model_err / n as f64, const_err / n as f64);
}

#[test]
fn copy_through_scores_one() {
    let f = fixture();
    let scenarios: Vec<Scenario> = f
        .split
        .test_unseen
        .iter()
        .filter(|id| f.corpus.get(id).unwrap().accent_label != HELD_OUT)
        .take(12)
        .map(|id| Scenario {
            mode: ScenarioMode::Inherent,
            speaker_ref: id.clone(),
            accent_ref: id.clone(),
            tokens: vec![0],
        })
        .collect();
    let outputs: Vec<_> = scenarios.iter().map(|s| f.corpus.get(&s.accent_ref).unwrap().clone()).collect();
    let report = score_outputs(&[&f.aid], &f.probe, &scenarios, &outputs, &f.corpus).unwrap();
    let m = &report.modes[&ScenarioMode::Inherent];
    assert_eq!(m.n, 12);
    assert!((m.acc_cos[0] - 1.0).abs() < 1e-12);
    assert!((m.spk_cos - 1.0).abs() < 1e-12);
}

#[test]
fn cross_outputs_carry_the_target_accent() {
    let f = fixture();
    let mut refs: Vec<String> = Vec::new();
    for id in &f.split.test_unseen {
        let utt = f.corpus.get(id).unwrap();
        if utt.accent_label != HELD_OUT && !refs.iter().any(|r| f.corpus.get(r).unwrap().speaker_id == utt.speaker_id) {
            refs.push(id.clone());
        }
    }
    let (mut hits, mut trials) = (0, 0);
    for spk in &refs {
        for acc in &refs {
            let (s, a) = (f.corpus.get(spk).unwrap(), f.corpus.get(acc).unwrap());
            if s.accent_label == a.accent_label {
                continue;
            }
            let scenario = Scenario {
                mode: ScenarioMode::Cross,
                speaker_ref: spk.clone(),
                accent_ref: acc.clone(),
                tokens: f.factors.content_codes[acc].clone(),
            };
            let out = synthesize(&f.gen, &scenario, &f.corpus, &f.aid, Some(&f.probe)).unwrap();
            let predicted = &f.aid.accents[predict_accent(&f.aid, &out).unwrap()];
            hits += usize::from(*predicted == a.accent_label);
            trials += 1;
        }
    }
    assert!(trials >= 50, "{trials} trials");
    assert!(2 * hits > trials, "{hits} of {trials} cross outputs carry the target accent");
}
