use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
n_accents = 4
speakers_per_accent = 8
utts_per_speaker = 10

[aid]
max_steps = 60
eval_interval = 20

[probe]
steps = 100

[gen]
max_steps = 40
held_out_accents = ["acc03"]

[eval.scenarios]
sentences = 2
"#;

fn accentkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accentkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn run_stage(cfg: &Path, run: &Path, command: &str) -> Output {
    let out = accentkit(&[command, "--config", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{command} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const STAGES: [&str; 8] = [
    "generate-data",
    "split",
    "train-aid",
    "eval-aid",
    "export-embeddings",
    "train-gen",
    "synth",
    "eval-gen",
];

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = accentkit(&["split", "--config", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data/manifest.jsonl") && err.contains("generate-data"), "{err}");
    // The lock is released after a failed command.
    assert!(!run.join(".lock").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let out = accentkit(&["generate-data", "--run-dir", r, "--set", "aid.bottlenek_dim=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bottlenek_dim"));

    let out = accentkit(&["generate-data", "--run-dir", r, "--set", "aid.bottleneck_dim=32", "--set", "gen.accent_embed_dim=32"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bottleneck must reduce dimension"));
    assert!(!run.join("data").exists());
}

#[test]
fn validate_config_reports_fields() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[aid]\nbottleneck_dim = 40\nembed_dim = 32\n\n[gen]\naccent_embed_dim = 7\n").unwrap();
    let out = accentkit(&["validate-config", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("aid.bottleneck_dim: bottleneck must reduce dimension"), "{err}");
    assert!(err.contains("gen.accent_embed_dim"), "{err}");

    let ok = accentkit(&["validate-config", "--profile", "paper-reference"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let missing = accentkit(&["validate-config", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn pipeline_is_deterministic_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for run in [&a, &b] {
        for stage in STAGES {
            run_stage(&cfg, run, stage);
        }
    }
    let mut sa = snapshot(&a);
    let mut sb = snapshot(&b);
    assert!(sa.remove("timings.json").is_some());
    assert!(sb.remove("timings.json").is_some());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs between identical runs");
    }

    let manifest: serde_json::Value = serde_json::from_slice(&sa["manifest.json"]).unwrap();
    let stages = manifest["stages"].as_object().unwrap();
    assert_eq!(stages.len(), STAGES.len());
    for (rel, sum) in stages["train-aid"]["artifacts"].as_object().unwrap() {
        assert_eq!(sum.as_str().unwrap().len(), 64, "{rel}");
    }

    run_stage(&cfg, &a, "train-aid");
    let again = snapshot(&a);
    assert_eq!(again["aid/model.ckpt"], sa["aid/model.ckpt"]);
    assert_eq!(again["manifest.json"], sa["manifest.json"]);
}

#[test]
fn ablate_prints_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    run_stage(&cfg, &run, "generate-data");
    run_stage(&cfg, &run, "split");
    let out = run_stage(&cfg, &run, "ablate");
    let text = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with('#')).collect();
    assert_eq!(rows.len(), 6, "{text}");
    assert!(text.contains("unseen P") && text.contains("SCSC"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("reports/ablation.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 6);
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (run, seed) in [(&a, "1"), (&b, "2")] {
        let out = accentkit(&["generate-data", "--config", c, "--run-dir", run.to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success());
    }
    assert_ne!(fs::read(a.join("data/frames.bin")).unwrap(), fs::read(b.join("data/frames.bin")).unwrap());
}
