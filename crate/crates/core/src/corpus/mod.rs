//! Probing datasets: knowledge items, class-labeled evidence texts, splits,
//! irrelevant-evidence augmentation, and the newline-padding ablation.
//!
//! Everything in this module is a pure function of its inputs and an explicit
//! seed; no global RNG, no shared mutable state.

mod facts;
mod generate;
mod io;

pub use facts::{make_knowledge_set, KnowledgeSetSpec, CONFLICTING_BANK_SIZE};
pub use generate::{generate_evidence, GenerationSpec};
pub use io::{ingest_evidence, read_knowledge_json, write_evidence_jsonl, write_knowledge_json};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{rng, subseed, subseed_idx};
use rand::seq::SliceRandom;

/// Errors raised by corpus construction and management.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no knowledge requested")]
    EmptyRequest,
    #[error("requested {requested} conflicting items but the bank holds {available}")]
    BankExhausted { requested: usize, available: usize },
    #[error("invalid knowledge item `{id}`: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("unknown class label `{label}` for knowledge item `{knowledge_id}`")]
    UnknownLabel { label: String, knowledge_id: String },
    #[error(
        "template/lexicon capacity {capacity} exhausted before producing {requested} distinct texts"
    )]
    CapacityExhausted { capacity: u128, requested: usize },
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("cannot split an empty record list")]
    EmptyRecords,
    #[error("stratum too small to split: ({knowledge_id}, {label}) has {n} record(s)")]
    StratumTooSmall {
        knowledge_id: String,
        label: String,
        n: usize,
    },
    #[error("irrelevant pool contaminated: pool record {index} shares knowledge_id `{id}`")]
    ContaminatedPool { index: usize, id: String },
    #[error("requested {n_irr} irrelevant passages but the pool holds {pool}")]
    PoolTooSmall { n_irr: usize, pool: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: unknown knowledge_id `{id}`")]
    UnknownKnowledgeId { line: usize, id: String },
    #[error("line {line}: label `{label}` not in classes of `{id}`")]
    UnknownIngestLabel {
        line: usize,
        label: String,
        id: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which experimental scenario a knowledge item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Factual vs. counterfactual evidence for a fact the model may know.
    Conflicting,
    /// Knowledge absent from training data, learnable only from context.
    Acquired,
}

/// Train/test split assignment for an evidence record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One probed fact: a question, its labeled answer classes, and the
/// character spans of the knowledge-related entities inside the question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub question: String,
    /// Ordered label -> answer-string map; order fixes class indexing.
    pub answer_classes: IndexMap<String, String>,
    /// Character spans `[start, end)` within `question` marking subject and
    /// relation tokens. Non-overlapping, in question order.
    pub entity_spans: Vec<(usize, usize)>,
    pub scenario: Scenario,
}

impl KnowledgeItem {
    /// Number of answer classes.
    pub fn num_classes(&self) -> usize {
        self.answer_classes.len()
    }

    /// Text of each entity span, in span order.
    pub fn entity_texts(&self) -> Vec<&str> {
        self.entity_spans
            .iter()
            .map(|&(s, e)| &self.question[s..e])
            .collect()
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::InvalidItem {
            id: self.id.clone(),
            reason,
        };
        if self.answer_classes.len() < 2 {
            return Err(fail("fewer than 2 answer classes".into()));
        }
        let mut answers: Vec<&String> = self.answer_classes.values().collect();
        answers.sort();
        if answers.windows(2).any(|w| w[0] == w[1]) {
            return Err(fail("answer strings are not pairwise distinct".into()));
        }
        if self.scenario == Scenario::Conflicting && self.answer_classes.len() != 2 {
            return Err(fail("conflicting items must have exactly 2 classes".into()));
        }
        if self.entity_spans.is_empty() {
            return Err(fail("no entity spans".into()));
        }
        let len = self.question.len();
        for &(s, e) in &self.entity_spans {
            if s >= e || e > len || !self.question.is_char_boundary(s) || !self.question.is_char_boundary(e) {
                return Err(fail(format!("entity span ({s}, {e}) out of bounds")));
            }
        }
        let mut sorted = self.entity_spans.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(fail("entity spans overlap".into()));
        }
        Ok(())
    }
}

/// One piece of context evidence; the unit of the probing dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub knowledge_id: String,
    pub class_label: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Seed of the generator stream that produced this record; 0 for
    /// ingested records.
    #[serde(default)]
    pub seed: u64,
}

/// Splits records 8:2-style, stratified per `(knowledge_id, class_label)`.
///
/// Each stratum contributes `floor(ratio * n)` records to the train side,
/// remainder to test; stratum membership is shuffled by a per-stratum seed
/// so the result does not depend on record or stratum order. Output lists
/// preserve the input order and carry their `split` field set.
pub fn split_dataset(
    records: &[EvidenceRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<EvidenceRecord>, Vec<EvidenceRecord>), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyRecords);
    }
    let mut strata: IndexMap<(String, String), Vec<usize>> = IndexMap::new();
    for (i, r) in records.iter().enumerate() {
        strata
            .entry((r.knowledge_id.clone(), r.class_label.clone()))
            .or_default()
            .push(i);
    }
    let mut is_train = vec![false; records.len()];
    for ((kid, label), indices) in &strata {
        if indices.len() < 2 {
            return Err(CorpusError::StratumTooSmall {
                knowledge_id: kid.clone(),
                label: label.clone(),
                n: indices.len(),
            });
        }
        let mut perm = indices.clone();
        let mut r = rng(subseed(seed, &["split", kid, label]));
        perm.shuffle(&mut r);
        let n_train = ((ratio * indices.len() as f64).floor() as usize).min(indices.len());
        for &idx in perm.iter().take(n_train) {
            is_train[idx] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let mut out = r.clone();
        if is_train[i] {
            out.split = Some(Split::Train);
            train.push(out);
        } else {
            out.split = Some(Split::Test);
            test.push(out);
        }
    }
    Ok((train, test))
}

/// Appends `n_irr` seed-chosen passages from `pool` after the record's text,
/// separated by blank lines. Label and knowledge id are untouched.
pub fn append_irrelevant(
    record: &EvidenceRecord,
    pool: &[EvidenceRecord],
    n_irr: usize,
    seed: u64,
) -> Result<EvidenceRecord, CorpusError> {
    for (i, p) in pool.iter().enumerate() {
        if p.knowledge_id == record.knowledge_id {
            return Err(CorpusError::ContaminatedPool {
                index: i,
                id: p.knowledge_id.clone(),
            });
        }
    }
    if n_irr > pool.len() {
        return Err(CorpusError::PoolTooSmall {
            n_irr,
            pool: pool.len(),
        });
    }
    let mut out = record.clone();
    if n_irr == 0 {
        return Ok(out);
    }
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    let mut r = rng(subseed_idx(seed, &[0x1a2b, n_irr as u64]));
    indices.shuffle(&mut r);
    for &idx in indices.iter().take(n_irr) {
        out.text.push_str("\n\n");
        out.text.push_str(&pool[idx].text);
    }
    Ok(out)
}

/// Appends exactly `k` newline characters to the evidence text.
pub fn pad_newlines(record: &EvidenceRecord, k: usize) -> EvidenceRecord {
    let mut out = record.clone();
    out.text.extend(std::iter::repeat('\n').take(k));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kid: &str, label: &str, text: &str) -> EvidenceRecord {
        EvidenceRecord {
            knowledge_id: kid.into(),
            class_label: label.into(),
            text: text.into(),
            split: None,
            seed: 1,
        }
    }

    fn stratum(kid: &str, label: &str, n: usize) -> Vec<EvidenceRecord> {
        (0..n)
            .map(|i| rec(kid, label, &format!("{kid}/{label}/text {i}")))
            .collect()
    }

    #[test]
    fn split_100_records_is_80_20() {
        let records = stratum("k", "a", 100);
        let (train, test) = split_dataset(&records, 0.8, 9).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        assert!(train.iter().all(|r| r.split == Some(Split::Train)));
        assert!(test.iter().all(|r| r.split == Some(Split::Test)));
    }

    #[test]
    fn split_two_records_is_one_one() {
        let records = stratum("k", "a", 2);
        let (train, test) = split_dataset(&records, 0.8, 0).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
    }

    #[test]
    fn split_is_exactly_stratified() {
        // Count per stratum via direct tally.
        let mut records = Vec::new();
        for s in 0..4 {
            records.extend(stratum(&format!("k{s}"), "a", 100));
        }
        let (train, test) = split_dataset(&records, 0.8, 123).unwrap();
        for s in 0..4 {
            let kid = format!("k{s}");
            let tr = train.iter().filter(|r| r.knowledge_id == kid).count();
            let te = test.iter().filter(|r| r.knowledge_id == kid).count();
            assert_eq!((tr, te), (80, 20), "stratum {kid}");
        }
    }

    #[test]
    fn split_rejects_tiny_stratum() {
        let records = stratum("k", "a", 1);
        let err = split_dataset(&records, 0.8, 0).unwrap_err();
        assert!(err.to_string().contains("stratum too small"));
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let records = stratum("k", "a", 4);
        assert!(split_dataset(&records, 0.0, 0).is_err());
        assert!(split_dataset(&records, 1.0, 0).is_err());
    }

    #[test]
    fn split_partitions_input() {
        let mut records = stratum("k1", "a", 7);
        records.extend(stratum("k1", "b", 5));
        records.extend(stratum("k2", "a", 3));
        let (train, test) = split_dataset(&records, 0.6, 4).unwrap();
        assert_eq!(train.len() + test.len(), records.len());
        let mut seen: Vec<String> = train
            .iter()
            .chain(test.iter())
            .map(|r| r.text.clone())
            .collect();
        seen.sort();
        let mut expect: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn append_irrelevant_identity_at_zero() {
        let base = rec("k", "a", "base text.");
        let pool = stratum("other", "x", 5);
        let out = append_irrelevant(&base, &pool, 0, 7).unwrap();
        assert_eq!(out.text, base.text);
    }

    #[test]
    fn append_irrelevant_block_count() {
        let base = rec("k", "a", "base text.");
        let pool = stratum("other", "x", 6);
        for n in 0..=5usize {
            let out = append_irrelevant(&base, &pool, n, 7).unwrap();
            assert_eq!(out.text.split("\n\n").count(), n + 1, "n_irr={n}");
            assert_eq!(out.class_label, base.class_label);
            assert_eq!(out.knowledge_id, base.knowledge_id);
        }
    }

    #[test]
    fn append_irrelevant_rejects_contamination() {
        let base = rec("k", "a", "base");
        let pool = vec![rec("k", "b", "same item")];
        let err = append_irrelevant(&base, &pool, 1, 0).unwrap_err();
        assert!(err.to_string().contains("contaminated"));
    }

    #[test]
    fn pad_newlines_lengths() {
        let base = rec("k", "a", "text");
        assert_eq!(pad_newlines(&base, 0), base);
        let padded = pad_newlines(&base, 3);
        assert_eq!(padded.text.len(), base.text.len() + 3);
        assert!(padded.text.ends_with("\n\n\n"));
        assert_eq!(padded.class_label, base.class_label);
    }

    #[test]
    fn item_validation_catches_overlap_and_dups() {
        let mut classes = IndexMap::new();
        classes.insert("a".to_string(), "Paris".to_string());
        classes.insert("b".to_string(), "Paris".to_string());
        let item = KnowledgeItem {
            id: "x".into(),
            question: "What is the capital of France?".into(),
            answer_classes: classes.clone(),
            entity_spans: vec![(12, 19), (23, 29)],
            scenario: Scenario::Conflicting,
        };
        assert!(item.validate().is_err());

        let mut ok = item.clone();
        ok.answer_classes.insert("b".to_string(), "Rome".to_string());
        ok.validate().unwrap();

        let mut bad_spans = ok.clone();
        bad_spans.entity_spans = vec![(12, 19), (15, 29)];
        assert!(bad_spans.validate().is_err());
    }
}
