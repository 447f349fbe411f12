//! Speaker-disjoint partitions and the inverse-frequency accent sampler.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Eligibility thresholds and split sizes.
///
/// [`SplitPolicy::paper_reference`] carries the full-scale thresholds; the default is a
/// desk-scale relaxation suited to synthetic corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPolicy {
    pub min_speakers_per_accent: usize,
    pub min_utts_per_train_speaker: usize,
    pub unseen_speakers_per_accent: usize,
    pub min_utts_per_unseen_speaker: usize,
    pub max_train_utts_per_speaker: usize,
    /// Fraction of each accent's unseen speakers assigned to validation.
    pub unseen_valid_test_ratio: f64,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            min_speakers_per_accent: 4,
            min_utts_per_train_speaker: 8,
            unseen_speakers_per_accent: 4,
            min_utts_per_unseen_speaker: 4,
            max_train_utts_per_speaker: 6,
            unseen_valid_test_ratio: 0.5,
            seed: 0,
        }
    }
}

impl SplitPolicy {
    pub fn paper_reference() -> Self {
        Self {
            min_speakers_per_accent: 10,
            min_utts_per_train_speaker: 50,
            unseen_speakers_per_accent: 20,
            min_utts_per_unseen_speaker: 10,
            max_train_utts_per_speaker: 30,
            unseen_valid_test_ratio: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unseen_speakers_per_accent < 2 {
            return Err(Error::validation(
                "split.unseen_speakers_per_accent",
                "need at least 2 (one validation, one test speaker)",
            ));
        }
        if self.max_train_utts_per_speaker < 1 {
            return Err(Error::validation("split.max_train_utts_per_speaker", "must be at least 1"));
        }
        if !(self.unseen_valid_test_ratio > 0.0 && self.unseen_valid_test_ratio < 1.0) {
            return Err(Error::validation("split.unseen_valid_test_ratio", "must lie in (0, 1)"));
        }
        if self.min_speakers_per_accent < 1 {
            return Err(Error::validation("split.min_speakers_per_accent", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub accent: String,
    pub reason: String,
}

/// The five partitions, as utterance ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<String>,
    pub valid_seen: Vec<String>,
    pub valid_unseen: Vec<String>,
    pub test_seen: Vec<String>,
    pub test_unseen: Vec<String>,
    pub eligible_accents: Vec<String>,
    pub excluded_accents: Vec<Exclusion>,
}

/// Identifies one of the five partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    ValidSeen,
    ValidUnseen,
    TestSeen,
    TestUnseen,
}

impl Part {
    pub const ALL: [Part; 5] = [
        Part::Train,
        Part::ValidSeen,
        Part::ValidUnseen,
        Part::TestSeen,
        Part::TestUnseen,
    ];
}

impl SplitSet {
    pub fn part(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.train,
            Part::ValidSeen => &self.valid_seen,
            Part::ValidUnseen => &self.valid_unseen,
            Part::TestSeen => &self.test_seen,
            Part::TestUnseen => &self.test_unseen,
        }
    }

    /// Sorted ids of the speakers that contribute training utterances.
    pub fn train_speakers(&self, corpus: &Corpus) -> Result<Vec<String>> {
        let mut set = BTreeSet::new();
        for id in &self.train {
            set.insert(corpus.get(id)?.speaker_id.clone());
        }
        Ok(set.into_iter().collect())
    }

    /// Index of an accent label within `eligible_accents`.
    pub fn accent_index(&self, accent: &str) -> Option<usize> {
        self.eligible_accents.iter().position(|a| a == accent)
    }
}

/// Partitions a corpus into speaker-disjoint seen and unseen parts.
pub fn build_splits(corpus: &Corpus, policy: &SplitPolicy) -> Result<SplitSet> {
    policy.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptySplit("corpus has no utterances".into()));
    }
    // accent -> speaker -> sorted utterance ids
    let mut tree: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for r in corpus.records() {
        tree.entry(&r.accent_label)
            .or_default()
            .entry(&r.speaker_id)
            .or_default()
            .push(&r.utt_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut out = SplitSet::default();

    for (accent, speakers) in &tree {
        let mut order: Vec<&str> = speakers.keys().copied().collect();
        order.shuffle(&mut rng);

        let mut unseen = Vec::new();
        let mut pool = Vec::new();
        for spk in order {
            let n = speakers[spk].len();
            if unseen.len() < policy.unseen_speakers_per_accent && n >= policy.min_utts_per_unseen_speaker {
                unseen.push(spk);
            } else if n >= policy.min_utts_per_train_speaker {
                pool.push(spk);
            }
        }
        let exclude = |reason: String| Exclusion {
            accent: accent.to_string(),
            reason,
        };
        if unseen.len() < policy.unseen_speakers_per_accent {
            out.excluded_accents.push(exclude(format!(
                "only {} speakers with >= {} utterances for the unseen sets, need {}",
                unseen.len(),
                policy.min_utts_per_unseen_speaker,
                policy.unseen_speakers_per_accent
            )));
            continue;
        }
        if pool.len() < policy.min_speakers_per_accent {
            out.excluded_accents.push(exclude(format!(
                "only {} training speakers with >= {} utterances, need {}",
                pool.len(),
                policy.min_utts_per_train_speaker,
                policy.min_speakers_per_accent
            )));
            continue;
        }

        let mut train = Vec::new();
        let mut overflow = Vec::new();
        pool.sort_unstable();
        for spk in &pool {
            let mut utts = speakers[spk].clone();
            utts.sort_unstable();
            utts.shuffle(&mut rng);
            let cap = policy.max_train_utts_per_speaker.min(utts.len());
            train.extend(utts[..cap].iter().map(|s| s.to_string()));
            overflow.extend(utts[cap..].iter().map(|s| s.to_string()));
        }
        if overflow.len() < 2 {
            out.excluded_accents.push(exclude(format!(
                "training speakers have {} utterances beyond the cap of {}, need 2 for seen-speaker evaluation",
                overflow.len(),
                policy.max_train_utts_per_speaker
            )));
            continue;
        }

        let n_valid = ((unseen.len() as f64 * policy.unseen_valid_test_ratio).round() as usize).clamp(1, unseen.len() - 1);
        unseen.sort_unstable();
        let (valid_spk, test_spk) = unseen.split_at(n_valid);
        let collect = |spks: &[&str]| -> Vec<String> {
            spks.iter()
                .flat_map(|s| speakers[s].iter().map(|u| u.to_string()))
                .collect()
        };

        // Overflow alternates between seen validation and seen test so both stay populated.
        for (i, id) in overflow.into_iter().enumerate() {
            if i % 2 == 0 {
                out.valid_seen.push(id);
            } else {
                out.test_seen.push(id);
            }
        }
        out.train.extend(train);
        out.valid_unseen.extend(collect(valid_spk));
        out.test_unseen.extend(collect(test_spk));
        out.eligible_accents.push(accent.to_string());
    }

    if out.eligible_accents.is_empty() {
        let reasons: Vec<String> = out
            .excluded_accents
            .iter()
            .map(|e| format!("{}: {}", e.accent, e.reason))
            .collect();
        return Err(Error::EmptySplit(format!(
            "no accent satisfies the split policy ({})",
            reasons.join("; ")
        )));
    }
    Ok(out)
}

/// Per-utterance sampling weights over the training part.
#[derive(Clone, Debug)]
pub struct WeightTable {
    ids: Vec<String>,
    weights: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl WeightTable {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::validation("weights", "empty weight table"));
        }
        if let Some((id, w)) = entries.iter().find(|(_, w)| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::validation("weights", format!("weight {w} for '{id}' is not positive")));
        }
        let (ids, weights): (Vec<String>, Vec<f64>) = entries.into_iter().unzip();
        let index = WeightedIndex::new(&weights).map_err(|e| Error::validation("weights", e.to_string()))?;
        Ok(Self { ids, weights, index })
    }

    /// Equal weight for every training utterance (no rebalancing).
    pub fn uniform(split: &SplitSet) -> Result<Self> {
        Self::new(split.train.iter().map(|id| (id.clone(), 1.0)).collect())
    }

    pub fn get(&self, utt_id: &str) -> Option<f64> {
        self.ids.iter().position(|i| i == utt_id).map(|i| self.weights[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids.iter().map(String::as_str).zip(self.weights.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Weights every training utterance by the inverse frequency of its accent.
///
/// Each accent's weights sum to one, so every accent is drawn with equal probability.
pub fn compute_sampling_weights(split: &SplitSet, corpus: &Corpus) -> Result<WeightTable> {
    if split.train.is_empty() {
        return Err(Error::validation("split.train", "no training utterances"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for id in &split.train {
        *counts.entry(&corpus.get(id)?.accent_label).or_default() += 1;
    }
    let entries = split
        .train
        .iter()
        .map(|id| {
            let accent = &corpus.get(id)?.accent_label;
            Ok((id.clone(), 1.0 / counts[accent.as_str()] as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    WeightTable::new(entries)
}

/// Draws `batch_size` utterance ids with replacement, proportionally to their weights.
pub fn sample_batch(weights: &WeightTable, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size", "must be at least 1"));
    }
    if weights.is_empty() {
        return Err(Error::validation("weights", "empty weight table"));
    }
    Ok((0..batch_size)
        .map(|_| weights.ids[weights.index.sample(rng)].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FrameMatrix, UtteranceRecord};

    /// Tiny corpus with explicit per-speaker utterance counts; frames are irrelevant to splitting.
    pub(crate) fn corpus_with_counts(accents: &[(&str, &[usize])]) -> Corpus {
        let mut records = Vec::new();
        for (accent, counts) in accents {
            for (s, &n) in counts.iter().enumerate() {
                let speaker = format!("{accent}-spk{s:02}");
                for u in 0..n {
                    records.push(UtteranceRecord {
                        utt_id: format!("{speaker}-u{u:03}"),
                        speaker_id: speaker.clone(),
                        accent_label: accent.to_string(),
                        frames: FrameMatrix::new(1, 1, vec![1.0]).unwrap(),
                        sample_period_ms: 10.0,
                    });
                }
            }
        }
        Corpus::new(records).unwrap()
    }

    fn speakers_of(corpus: &Corpus, ids: &[String]) -> BTreeSet<String> {
        ids.iter().map(|id| corpus.get(id).unwrap().speaker_id.clone()).collect()
    }

    #[test]
    fn twelve_speakers_with_four_unseen() {
        let corpus = corpus_with_counts(&[("acc00", &[10; 12]), ("acc01", &[10; 12])]);
        let split = build_splits(&corpus, &SplitPolicy::default()).unwrap();
        for accent in ["acc00", "acc01"] {
            let filter = |ids: &[String]| -> BTreeSet<String> {
                speakers_of(&corpus, ids)
                    .into_iter()
                    .filter(|s| s.starts_with(accent))
                    .collect()
            };
            assert_eq!(filter(&split.train).len(), 8);
            assert_eq!(filter(&split.valid_unseen).len(), 2);
            assert_eq!(filter(&split.test_unseen).len(), 2);
        }
    }

    #[test]
    fn train_cap_of_thirty_keeps_exactly_thirty() {
        let mut counts = vec![50usize; 12];
        counts[0] = 50;
        let corpus = corpus_with_counts(&[("acc00", &counts)]);
        let policy = SplitPolicy {
            min_utts_per_train_speaker: 10,
            max_train_utts_per_speaker: 30,
            ..SplitPolicy::default()
        };
        let split = build_splits(&corpus, &policy).unwrap();
        let mut per_speaker: BTreeMap<String, usize> = BTreeMap::new();
        for id in &split.train {
            *per_speaker.entry(corpus.get(id).unwrap().speaker_id.clone()).or_default() += 1;
        }
        assert_eq!(per_speaker.len(), 8);
        assert!(per_speaker.values().all(|&n| n == 30));
        assert_eq!(split.valid_seen.len() + split.test_seen.len(), 8 * 20);
    }

    #[test]
    fn small_accent_is_excluded_everywhere() {
        let corpus = corpus_with_counts(&[("acc00", &[10; 12]), ("acc01", &[10; 6])]);
        let split = build_splits(&corpus, &SplitPolicy::default()).unwrap();
        assert_eq!(split.eligible_accents, vec!["acc00".to_string()]);
        assert_eq!(split.excluded_accents.len(), 1);
        assert_eq!(split.excluded_accents[0].accent, "acc01");
        for part in Part::ALL {
            assert!(split.part(part).iter().all(|id| !id.starts_with("acc01")));
        }
    }

    #[test]
    fn nothing_eligible_is_an_empty_split_error() {
        let corpus = corpus_with_counts(&[("acc00", &[10; 5])]);
        assert!(matches!(
            build_splits(&corpus, &SplitPolicy::default()),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn weights_equalize_accent_mass() {
        let corpus = corpus_with_counts(&[("acc00", &[20; 10]), ("acc01", &[60; 10])]);
        let policy = SplitPolicy {
            max_train_utts_per_speaker: 100,
            min_utts_per_train_speaker: 1,
            ..SplitPolicy::default()
        };
        // No overflow means both accents are excluded, so hand-build the split instead.
        assert!(build_splits(&corpus, &policy).is_err());
        let train = corpus
            .records()
            .iter()
            .filter(|r| {
                let u: usize = r.utt_id[r.utt_id.len() - 3..].parse().unwrap();
                if r.accent_label == "acc00" { u < 10 } else { u < 30 }
            })
            .map(|r| r.utt_id.clone())
            .collect();
        let split = SplitSet {
            train,
            ..SplitSet::default()
        };
        // 100 acc00 utterances and 300 acc01 utterances.
        let table = compute_sampling_weights(&split, &corpus).unwrap();
        let mass = |accent: &str| -> f64 {
            table.iter().filter(|(id, _)| id.starts_with(accent)).map(|(_, w)| w).sum()
        };
        assert!((table.get("acc00-spk00-u000").unwrap() - 0.01).abs() < 1e-15);
        assert!((table.get("acc01-spk00-u000").unwrap() - 1.0 / 300.0).abs() < 1e-15);
        assert!((mass("acc00") - mass("acc01")).abs() < 1e-9);
    }

    #[test]
    fn single_accent_weights_are_equal() {
        let corpus = corpus_with_counts(&[("acc00", &[10; 12])]);
        let split = build_splits(&corpus, &SplitPolicy::default()).unwrap();
        let table = compute_sampling_weights(&split, &corpus).unwrap();
        let first = table.iter().next().unwrap().1;
        assert!(table.iter().all(|(_, w)| w == first));
    }

    #[test]
    fn batch_sampling_is_deterministic_and_rejects_zero() {
        let corpus = corpus_with_counts(&[("acc00", &[10; 12]), ("acc01", &[10; 12])]);
        let split = build_splits(&corpus, &SplitPolicy::default()).unwrap();
        let table = compute_sampling_weights(&split, &corpus).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            sample_batch(&table, 16, &mut a).unwrap(),
            sample_batch(&table, 16, &mut b).unwrap()
        );
        assert!(sample_batch(&table, 0, &mut a).is_err());
    }

    #[test]
    fn policy_validation() {
        let bad = SplitPolicy {
            unseen_speakers_per_accent: 1,
            ..SplitPolicy::default()
        };
        assert!(bad.validate().is_err());
        assert!(SplitPolicy::paper_reference().validate().is_ok());
    }
}
