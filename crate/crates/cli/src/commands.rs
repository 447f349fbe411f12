use std::fs;
use std::path::Path;

use accentkit_core::eval::{export_embeddings, train_frame_probe};
use accentkit_core::synthgen::{build_scenarios, score_outputs, Scenario, ScenarioMode};
use accentkit_core::{
    build_splits, evaluate_aid, generate_corpus, load_factors, load_manifest, save_factors, save_manifest, synthesize,
    train_aid, train_generator, AidConfig, AidEvaluation, AidModel, Corpus, GenModel, GenReport, ProbeModel, SplitSet,
    UtteranceRecord,
};
use serde::{Deserialize, Serialize};

use crate::ablate::{format_table, run_ladder};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::rundir::RunDir;

pub const CORPUS_MANIFEST: &str = "data/manifest.jsonl";
pub const CORPUS_FRAMES: &str = "data/frames.bin";
pub const FACTORS: &str = "data/factors.json";
pub const SPLITS: &str = "splits.json";
pub const AID_MODEL: &str = "aid/model.ckpt";
pub const AID_LOG: &str = "aid/train_log.jsonl";
pub const AID_SUMMARY: &str = "aid/summary.json";
pub const AID_REPORT: &str = "reports/aid_eval.json";
pub const EMBEDDINGS: &str = "embeddings/test_unseen.jsonl";
pub const EMBEDDINGS_BLOB: &str = "embeddings/test_unseen.bin";
pub const PROBE: &str = "gen/probe.ckpt";
pub const GEN_MODEL: &str = "gen/model.ckpt";
pub const GEN_LOG: &str = "gen/train_log.jsonl";
pub const GEN_ZERO_MODEL: &str = "gen/zero_accent.ckpt";
pub const GEN_ZERO_LOG: &str = "gen/zero_accent_log.jsonl";
pub const GEN_SUMMARY: &str = "gen/summary.json";
pub const SCENARIOS: &str = "synth/scenarios.jsonl";
pub const SYNTH_DIR: &str = "synth/conditioned";
pub const SYNTH_ZERO_DIR: &str = "synth/zero_accent";
pub const SCORER_MODEL: &str = "eval-gen/scorer.ckpt";
pub const GEN_REPORT: &str = "reports/gen_eval.json";
pub const ABLATION_REPORT: &str = "reports/ablation.json";
pub const ABLATION_TABLE: &str = "reports/ablation.txt";

/// What a finished stage hands back: its artifacts (relative paths) and a human summary.
pub struct StageOutput {
    pub artifacts: Vec<String>,
    pub summary: String,
}

fn corpus(run: &RunDir) -> CliResult<Corpus> {
    let path = run.require(CORPUS_MANIFEST, "generate-data")?;
    Ok(Corpus::new(load_manifest(&path)?)?)
}

fn splits(run: &RunDir) -> CliResult<SplitSet> {
    let path = run.require(SPLITS, "split")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn aid_model(run: &RunDir) -> CliResult<AidModel> {
    Ok(AidModel::load(&run.require(AID_MODEL, "train-aid")?)?)
}

fn manifest_pair(dir: &str) -> [String; 2] {
    [format!("{dir}/manifest.jsonl"), format!("{dir}/frames.bin")]
}

pub fn generate_data(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let (records, factors) = generate_corpus(&config.corpus)?;
    let n = records.len();
    save_manifest(&records, &run.path("data"))?;
    save_factors(&factors, &run.path(FACTORS))?;
    Ok(StageOutput {
        artifacts: vec![CORPUS_MANIFEST.into(), CORPUS_FRAMES.into(), FACTORS.into()],
        summary: format!(
            "{n} utterances, {} accents x {} speakers",
            config.corpus.n_accents, config.corpus.speakers_per_accent
        ),
    })
}

pub fn split(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let corpus = corpus(run)?;
    let split = build_splits(&corpus, &config.split)?;
    run.write_json(SPLITS, &split)?;
    Ok(StageOutput {
        artifacts: vec![SPLITS.into()],
        summary: format!(
            "train {} / valid seen {} / test seen {} / valid unseen {} / test unseen {}; {} accents eligible, {} excluded",
            split.train.len(),
            split.valid_seen.len(),
            split.test_seen.len(),
            split.valid_unseen.len(),
            split.test_unseen.len(),
            split.eligible_accents.len(),
            split.excluded_accents.len()
        ),
    })
}

#[derive(Serialize)]
struct AidSummary<'a> {
    optimizer: &'a str,
    steps: usize,
    best_step: Option<usize>,
    best_valid_f1: Option<f64>,
    stopped_early: bool,
}

pub fn train_aid_stage(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let corpus = corpus(run)?;
    let split = splits(run)?;
    let (model, log) = train_aid(&config.aid, &split, &corpus, &config.augment)?;
    model.save(&run.create_parent(AID_MODEL)?)?;
    run.write(AID_LOG, log.to_json_lines())?;
    run.write_json(
        AID_SUMMARY,
        &AidSummary {
            optimizer: &log.optimizer,
            steps: log.len(),
            best_step: log.best_step,
            best_valid_f1: log.best_valid_f1,
            stopped_early: log.stopped_early,
        },
    )?;
    Ok(StageOutput {
        artifacts: vec![AID_MODEL.into(), AID_LOG.into(), AID_SUMMARY.into()],
        summary: format!(
            "{} steps, best validation macro-F1 {:.4} at step {}",
            log.len(),
            log.best_valid_f1.unwrap_or(f64::NAN),
            log.best_step.map_or("-".to_string(), |s| s.to_string())
        ),
    })
}

pub fn eval_aid(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let model = aid_model(run)?;
    let corpus = corpus(run)?;
    let split = splits(run)?;
    let ev: AidEvaluation = evaluate_aid(&model, &corpus, &split, &config.probe)?;
    run.write_json(AID_REPORT, &ev)?;
    Ok(StageOutput {
        artifacts: vec![AID_REPORT.into()],
        summary: format!(
            "seen acc {:.4} f1 {:.4} | unseen acc {:.4} f1 {:.4} | gap {:.4} | SCSC {:.4} | speaker probe {:.4}",
            ev.seen.accuracy,
            ev.seen.macro_f1,
            ev.unseen.accuracy,
            ev.unseen.macro_f1,
            ev.gap.acc_gap,
            ev.scsc.scsc,
            ev.speaker_probe_accuracy
        ),
    })
}

pub fn export_embeddings_stage(run: &RunDir, _config: &RunConfig) -> CliResult<StageOutput> {
    let model = aid_model(run)?;
    let corpus = corpus(run)?;
    let split = splits(run)?;
    export_embeddings(&model, &corpus, &split.test_unseen, &run.path(EMBEDDINGS))?;
    Ok(StageOutput {
        artifacts: vec![EMBEDDINGS.into(), EMBEDDINGS_BLOB.into()],
        summary: format!(
            "{} test-unseen embeddings of width {}",
            split.test_unseen.len(),
            model.accent_embed_dim()
        ),
    })
}

#[derive(Serialize)]
struct GenSummary {
    trained_accents: Vec<String>,
    held_out_accents: Vec<String>,
    initial_reconstruction_mse: f64,
    final_reconstruction_mse: f64,
    zero_accent_final_reconstruction_mse: Option<f64>,
}

pub fn train_gen(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let aid = aid_model(run)?;
    let corpus = corpus(run)?;
    let factors = load_factors(&run.require(FACTORS, "generate-data")?)?;
    let split = splits(run)?;
    let probe = train_frame_probe(&corpus, &split.train, &config.probe)?;
    probe.save(&run.create_parent(PROBE)?)?;
    let (model, log) = train_generator(&config.gen, &corpus, &factors, &split, &aid, &probe)?;
    model.save(&run.path(GEN_MODEL))?;
    run.write(GEN_LOG, log.to_json_lines())?;
    let mut artifacts = vec![PROBE.to_string(), GEN_MODEL.into(), GEN_LOG.into()];
    let mut zero_mse = None;
    if config.eval.zero_accent_ablation {
        let zero_cfg = accentkit_core::GenConfig {
            zero_accent: true,
            ..config.gen.clone()
        };
        let (zero, zlog) = train_generator(&zero_cfg, &corpus, &factors, &split, &aid, &probe)?;
        zero.save(&run.path(GEN_ZERO_MODEL))?;
        run.write(GEN_ZERO_LOG, zlog.to_json_lines())?;
        zero_mse = Some(zlog.final_reconstruction_mse);
        artifacts.extend([GEN_ZERO_MODEL.to_string(), GEN_ZERO_LOG.into()]);
    }
    run.write_json(
        GEN_SUMMARY,
        &GenSummary {
            trained_accents: model.trained_accents.clone(),
            held_out_accents: model.config.held_out_accents.clone(),
            initial_reconstruction_mse: log.initial_reconstruction_mse,
            final_reconstruction_mse: log.final_reconstruction_mse,
            zero_accent_final_reconstruction_mse: zero_mse,
        },
    )?;
    artifacts.push(GEN_SUMMARY.into());
    Ok(StageOutput {
        artifacts,
        summary: format!(
            "reconstruction MSE {:.5} -> {:.5} over {} steps; held out {:?}",
            log.initial_reconstruction_mse,
            log.final_reconstruction_mse,
            log.entries.len(),
            model.config.held_out_accents
        ),
    })
}

fn write_jsonl<T: Serialize>(run: &RunDir, rel: &str, items: &[T]) -> CliResult<()> {
    let text: String = items
        .iter()
        .map(|s| serde_json::to_string(s).expect("item serializes") + "\n")
        .collect();
    run.write(rel, text)?;
    Ok(())
}

pub fn read_scenarios(path: &Path) -> CliResult<Vec<Scenario>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Synthesizes every scenario; output ids carry the scenario index so repeated references stay unique.
fn synthesize_all(
    model: &GenModel,
    scenarios: &[Scenario],
    corpus: &Corpus,
    aid: &AidModel,
    probe: &ProbeModel,
) -> CliResult<Vec<UtteranceRecord>> {
    scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut out = synthesize(model, s, corpus, aid, Some(probe))?;
            out.utt_id = format!("{}:{i:05}", out.utt_id);
            Ok(out)
        })
        .collect()
}

pub fn synth(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let aid = aid_model(run)?;
    let model = GenModel::load(&run.require(GEN_MODEL, "train-gen")?)?;
    let probe = ProbeModel::load(&run.require(PROBE, "train-gen")?)?;
    let corpus = corpus(run)?;
    let split = splits(run)?;
    let scenarios = build_scenarios(&corpus, &split, &model, &config.eval.scenarios)?;
    write_jsonl(run, SCENARIOS, &scenarios)?;
    let outputs = synthesize_all(&model, &scenarios, &corpus, &aid, &probe)?;
    save_manifest(&outputs, &run.path(SYNTH_DIR))?;
    let mut artifacts = vec![SCENARIOS.to_string()];
    artifacts.extend(manifest_pair(SYNTH_DIR));
    if run.path(GEN_ZERO_MODEL).exists() {
        let zero = GenModel::load(&run.path(GEN_ZERO_MODEL))?;
        let zero_out = synthesize_all(&zero, &scenarios, &corpus, &aid, &probe)?;
        save_manifest(&zero_out, &run.path(SYNTH_ZERO_DIR))?;
        artifacts.extend(manifest_pair(SYNTH_ZERO_DIR));
    }
    let count = |m: ScenarioMode| scenarios.iter().filter(|s| s.mode == m).count();
    Ok(StageOutput {
        artifacts,
        summary: format!(
            "{} outputs: {} inherent, {} cross, {} unseen",
            scenarios.len(),
            count(ScenarioMode::Inherent),
            count(ScenarioMode::Cross),
            count(ScenarioMode::Unseen)
        ),
    })
}

/// Generation scores under the configured identifier and an independently trained second scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenEvaluation {
    pub scorers: Vec<String>,
    pub conditioned: GenReport,
    pub zero_accent: Option<GenReport>,
}

/// The second scorer: no bottleneck and no adversary, trained with its own seed.
pub fn scorer_config(config: &RunConfig) -> AidConfig {
    AidConfig {
        use_bottleneck: false,
        alpha: 0.0,
        seed: config.aid.seed.wrapping_add(config.eval.scorer_seed_offset),
        ..config.aid.clone()
    }
}

pub fn eval_gen(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let aid = aid_model(run)?;
    let probe = ProbeModel::load(&run.require(PROBE, "train-gen")?)?;
    let scenarios = read_scenarios(&run.require(SCENARIOS, "synth")?)?;
    let outputs = load_manifest(&run.require(&format!("{SYNTH_DIR}/manifest.jsonl"), "synth")?)?;
    let corpus = corpus(run)?;
    let split = splits(run)?;
    let (scorer, _) = train_aid(&scorer_config(config), &split, &corpus, &config.augment)?;
    scorer.save(&run.create_parent(SCORER_MODEL)?)?;
    let scorers = [&aid, &scorer];
    let conditioned = score_outputs(&scorers, &probe, &scenarios, &outputs, &corpus)?;
    let zero_path = run.path(&format!("{SYNTH_ZERO_DIR}/manifest.jsonl"));
    let zero_accent = if zero_path.exists() {
        Some(score_outputs(&scorers, &probe, &scenarios, &load_manifest(&zero_path)?, &corpus)?)
    } else {
        None
    };
    let report = GenEvaluation {
        scorers: vec![AID_MODEL.into(), SCORER_MODEL.into()],
        conditioned,
        zero_accent,
    };
    run.write_json(GEN_REPORT, &report)?;
    Ok(StageOutput {
        artifacts: vec![SCORER_MODEL.into(), GEN_REPORT.into()],
        summary: format_gen_report(&report),
    })
}

pub fn format_gen_report(report: &GenEvaluation) -> String {
    let mut lines = vec![format!(
        "{:<22} | {:>5} | {:>9} | {:>9} | {:>8} | {:>9} | {:>9}",
        "system / mode", "n", "AccCos 1", "AccCos 2", "SpkCos", "target 1", "target 2"
    )];
    let mut push = |name: &str, r: &GenReport| {
        for (mode, m) in &r.modes {
            lines.push(format!(
                "{:<22} | {:>5} | {:>9.4} | {:>9.4} | {:>8.4} | {:>9.4} | {:>9.4}",
                format!("{name} / {}", mode.as_str()),
                m.n,
                m.acc_cos[0],
                m.acc_cos.get(1).copied().unwrap_or(f64::NAN),
                m.spk_cos,
                m.target_accent_rate[0],
                m.target_accent_rate.get(1).copied().unwrap_or(f64::NAN)
            ));
        }
    };
    push("conditioned", &report.conditioned);
    if let Some(z) = &report.zero_accent {
        push("zero accent", z);
    }
    lines.join("\n")
}

pub fn ablate(run: &RunDir, config: &RunConfig) -> CliResult<StageOutput> {
    let corpus = corpus(run)?;
    let split = splits(run)?;
    let rows = run_ladder(&config.aid, &corpus, &split, &config.augment, &config.probe)?;
    run.write_json(ABLATION_REPORT, &rows)?;
    let table = format_table(&rows);
    run.write(ABLATION_TABLE, &table)?;
    Ok(StageOutput {
        artifacts: vec![ABLATION_REPORT.into(), ABLATION_TABLE.into()],
        summary: table.trim_end().to_string(),
    })
}
