use std::fmt::Write;

use accentkit_core::{evaluate_aid, train_aid, AidConfig, AidEvaluation, AugmentConfig, Corpus, ProbeConfig, SplitSet, ValidationSpeakers};
use serde::{Deserialize, Serialize};

/// The six accumulative accent-identifier variants, from a plain classifier up to the
/// full bottleneck-plus-adversary model. Widths, learning rate and schedule come from `base`.
pub fn ladder(base: &AidConfig) -> Vec<(&'static str, AidConfig)> {
    let v1 = AidConfig {
        validate_on: ValidationSpeakers::Seen,
        weighted_sampling: false,
        augment: false,
        use_bottleneck: false,
        alpha: 0.0,
        ..base.clone()
    };
    let v2 = AidConfig {
        validate_on: ValidationSpeakers::Unseen,
        ..v1.clone()
    };
    let v3 = AidConfig {
        weighted_sampling: true,
        ..v2.clone()
    };
    let v4 = AidConfig { augment: true, ..v3.clone() };
    let v5 = AidConfig {
        use_bottleneck: true,
        ..v4.clone()
    };
    let v6 = AidConfig {
        alpha: base.alpha,
        ..v5.clone()
    };
    vec![
        ("#1 baseline", v1),
        ("#2 w/ unseen-speaker validation", v2),
        ("#3 w/ weighted sampler", v3),
        ("#4 w/ perturbation", v4),
        ("#5 w/ bottleneck", v5),
        ("#6 w/ adversarial loss", v6),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub system: String,
    pub seen_f1: f64,
    pub seen_acc: f64,
    pub unseen_precision: f64,
    pub unseen_recall: f64,
    pub unseen_f1: f64,
    pub unseen_acc: f64,
    pub f1_gap: f64,
    pub acc_gap: f64,
    pub scsc: f64,
    pub speaker_probe_accuracy: f64,
}

impl AblationRow {
    pub fn new(system: &str, ev: &AidEvaluation) -> Self {
        Self {
            system: system.to_string(),
            seen_f1: ev.seen.macro_f1,
            seen_acc: ev.seen.accuracy,
            unseen_precision: ev.unseen.macro_precision,
            unseen_recall: ev.unseen.macro_recall,
            unseen_f1: ev.unseen.macro_f1,
            unseen_acc: ev.unseen.accuracy,
            f1_gap: ev.gap.f1_gap,
            acc_gap: ev.gap.acc_gap,
            scsc: ev.scsc.scsc,
            speaker_probe_accuracy: ev.speaker_probe_accuracy,
        }
    }
}

pub fn run_ladder(
    base: &AidConfig,
    corpus: &Corpus,
    split: &SplitSet,
    augment: &AugmentConfig,
    probe: &ProbeConfig,
) -> accentkit_core::Result<Vec<AblationRow>> {
    ladder(base)
        .into_iter()
        .map(|(name, config)| {
            let (model, _) = train_aid(&config, split, corpus, augment)?;
            Ok(AblationRow::new(name, &evaluate_aid(&model, corpus, split, probe)?))
        })
        .collect()
}

pub const TABLE_COLUMNS: [&str; 10] = [
    "system",
    "seen f1",
    "seen acc",
    "unseen P",
    "unseen R",
    "unseen f1",
    "unseen acc",
    "f1 gap",
    "acc gap",
    "SCSC",
];

/// Fixed-width text table, one row per variant.
pub fn format_table(rows: &[AblationRow]) -> String {
    let name_w = rows.iter().map(|r| r.system.len()).max().unwrap_or(0).max(TABLE_COLUMNS[0].len());
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", TABLE_COLUMNS[0]);
    for c in &TABLE_COLUMNS[1..] {
        let _ = write!(out, " | {c:>10}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + 13 * (TABLE_COLUMNS.len() - 1)));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<name_w$}", r.system);
        for v in [
            r.seen_f1,
            r.seen_acc,
            r.unseen_precision,
            r.unseen_recall,
            r.unseen_f1,
            r.unseen_acc,
            r.f1_gap,
            r.acc_gap,
            r.scsc,
        ] {
            let _ = write!(out, " | {v:>10.4}");
        }
        out.push('\n');
    }
    out
}
