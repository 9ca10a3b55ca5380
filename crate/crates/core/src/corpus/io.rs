//! Corpus file formats: evidence JSONL and knowledge-set JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::{CorpusError, EvidenceRecord, KnowledgeItem, Split};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvidenceLine {
    knowledge_id: String,
    class_label: String,
    text: String,
    #[serde(default)]
    split: Option<Split>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Reads evidence records from a JSONL file (one object per line, UTF-8,
/// LF line endings). When `knowledge` is supplied, every record's id and
/// label are validated against it.
pub fn ingest_evidence(
    path: &Path,
    knowledge: Option<&[KnowledgeItem]>,
) -> Result<Vec<EvidenceRecord>, CorpusError> {
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EvidenceLine =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        if parsed.text.is_empty() {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                reason: "text is empty".into(),
            });
        }
        if let Some(items) = knowledge {
            let item = items
                .iter()
                .find(|it| it.id == parsed.knowledge_id)
                .ok_or_else(|| CorpusError::UnknownKnowledgeId {
                    line: line_no,
                    id: parsed.knowledge_id.clone(),
                })?;
            if !item.answer_classes.contains_key(&parsed.class_label) {
                return Err(CorpusError::UnknownIngestLabel {
                    line: line_no,
                    label: parsed.class_label.clone(),
                    id: parsed.knowledge_id.clone(),
                });
            }
        }
        records.push(EvidenceRecord {
            knowledge_id: parsed.knowledge_id,
            class_label: parsed.class_label,
            text: parsed.text,
            split: parsed.split,
            seed: parsed.seed.unwrap_or(0),
        });
    }
    Ok(records)
}

/// Writes evidence records as JSONL with LF line endings.
pub fn write_evidence_jsonl(records: &[EvidenceRecord], path: &Path) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Writes the knowledge set as a JSON array.
pub fn write_knowledge_json(items: &[KnowledgeItem], path: &Path) -> Result<(), CorpusError> {
    let mut bytes = serde_json::to_vec_pretty(items)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads and validates a knowledge-set JSON file.
pub fn read_knowledge_json(path: &Path) -> Result<Vec<KnowledgeItem>, CorpusError> {
    let content = fs::read_to_string(path)?;
    let items: Vec<KnowledgeItem> = serde_json::from_str(&content)?;
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_evidence, make_knowledge_set, GenerationSpec, KnowledgeSetSpec};

    #[test]
    fn evidence_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evidence.jsonl");
        let items = make_knowledge_set(
            &KnowledgeSetSpec {
                n_conflicting: 1,
                acquired: false,
                k_acquired: 0,
            },
            1,
        )
        .unwrap();
        let spec = GenerationSpec {
            n_per_class: 4,
            ..GenerationSpec::default()
        };
        let records = generate_evidence(&items[0], "factual", &spec).unwrap();
        write_evidence_jsonl(&records, &path).unwrap();
        let back = ingest_evidence(&path, Some(&items)).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evidence.jsonl");
        fs::write(
            &path,
            "{\"knowledge_id\":\"k\",\"class_label\":\"a\",\"text\":\"t\"}\nnot json\n",
        )
        .unwrap();
        let err = ingest_evidence(&path, None).unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
    }

    #[test]
    fn unknown_label_rejected_with_knowledge() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evidence.jsonl");
        let items = make_knowledge_set(
            &KnowledgeSetSpec {
                n_conflicting: 1,
                acquired: false,
                k_acquired: 0,
            },
            1,
        )
        .unwrap();
        let line = format!(
            "{{\"knowledge_id\":\"{}\",\"class_label\":\"bogus\",\"text\":\"t\"}}\n",
            items[0].id
        );
        fs::write(&path, line).unwrap();
        let err = ingest_evidence(&path, Some(&items)).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownIngestLabel { line: 1, .. }));
        // Without a knowledge set the same file ingests fine, split unset.
        let recs = ingest_evidence(&path, None).unwrap();
        assert_eq!(recs[0].split, None);
        assert_eq!(recs[0].seed, 0);
    }

    #[test]
    fn knowledge_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("knowledge.json");
        let items = make_knowledge_set(&KnowledgeSetSpec::default(), 17).unwrap();
        write_knowledge_json(&items, &path).unwrap();
        let back = read_knowledge_json(&path).unwrap();
        assert_eq!(back, items);
    }
}
