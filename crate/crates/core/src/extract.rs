//! Prompt assembly, question-token location and roles, representation
//! extraction at the three tap points, and the persisted representation
//! cache.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EvidenceRecord, KnowledgeItem, Split};
use crate::lm::{LmError, LmSample, Model, Tokenizer};
use crate::scalar::Scalar;

/// Fixed instruction line; freezing the wording keeps caches comparable
/// across runs.
pub const INSTRUCTION: &str = "Answer the question based solely on the provided evidence.";

const CACHE_MAGIC: &[u8; 4] = b"RPC1";

/// Where inside a transformer layer a representation is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Residual stream after the full layer.
    Block,
    /// Attention sublayer output before residual addition.
    Attn,
    /// MLP sublayer output before residual addition.
    Mlp,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Block, Tap::Attn, Tap::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Block => "block",
            Tap::Attn => "attn",
            Tap::Mlp => "mlp",
        }
    }

    /// Stable id used in per-cell seed derivation.
    pub fn id(self) -> u64 {
        match self {
            Tap::Block => 0,
            Tap::Attn => 1,
            Tap::Mlp => 2,
        }
    }
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a question token lies inside a knowledge-entity span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Entity,
    Other,
}

impl TokenRole {
    pub fn name(self) -> &'static str {
        match self {
            TokenRole::Entity => "entity",
            TokenRole::Other => "other",
        }
    }
}

/// Errors raised by prompt building, extraction, and cache I/O.
#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("prompt of {len} tokens exceeds max_seq {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("record {index} references `{found}`, expected `{expected}`")]
    MixedKnowledge {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("record {index} has no split assignment; split the dataset before extraction")]
    MissingSplit { index: usize },
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("duplicate layer {0} requested")]
    DuplicateLayer(usize),
    #[error("non-finite representation value in record {record}")]
    NonFinite { record: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("cache magic/version mismatch")]
    BadMagic,
    #[error("cache header: {0}")]
    Header(String),
    #[error("cache truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("cache header/payload size disagreement: header implies {expected} bytes, file holds {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token-level layout of an assembled probing prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub tokens: Vec<usize>,
    /// Token index range `[start, end)` of the question inside `tokens`.
    pub question_span: (usize, usize),
    /// Role per question token, in question order.
    pub token_roles: Vec<TokenRole>,
    pub last_question_token: usize,
}

impl PromptLayout {
    pub fn question_len(&self) -> usize {
        self.question_span.1 - self.question_span.0
    }
}

/// The frozen prompt text.
pub fn prompt_text(evidence: &str, question: &str) -> String {
    format!("{INSTRUCTION}\n{evidence}\nQuestion: {question}\nAnswer:")
}

/// Assembles the prompt and aligns entity spans to question tokens by
/// character offset (exact under the character vocabulary).
pub fn build_prompt(
    tokenizer: &Tokenizer,
    evidence: &str,
    question: &str,
    entity_spans: &[(usize, usize)],
    max_seq: usize,
) -> Result<PromptLayout, ExtractError> {
    if evidence.is_empty() {
        return Err(ExtractError::EmptyInput("evidence"));
    }
    if question.is_empty() {
        return Err(ExtractError::EmptyInput("question"));
    }
    let text = prompt_text(evidence, question);
    let tokens = tokenizer.tokenize(&text)?;
    if tokens.len() > max_seq {
        return Err(ExtractError::PromptTooLong {
            len: tokens.len(),
            max: max_seq,
        });
    }
    // One token per character, so token indices equal character offsets.
    let start = INSTRUCTION.len() + 1 + evidence.len() + 1 + "Question: ".len();
    let end = start + question.len();
    debug_assert_eq!(tokenizer.detokenize(&tokens[start..end]).unwrap(), question);
    let token_roles = (0..question.len())
        .map(|i| {
            if entity_spans.iter().any(|&(s, e)| i >= s && i < e) {
                TokenRole::Entity
            } else {
                TokenRole::Other
            }
        })
        .collect();
    Ok(PromptLayout {
        tokens,
        question_span: (start, end),
        token_roles,
        last_question_token: end - 1,
    })
}

/// Builds one training sequence: prompt, a space, the answer, and the
/// newline terminator; `answer_span` covers the continuation.
pub fn build_training_sample(
    tokenizer: &Tokenizer,
    evidence: &str,
    question: &str,
    answer: &str,
    max_seq: usize,
) -> Result<LmSample, ExtractError> {
    let layout = build_prompt(tokenizer, evidence, question, &[], max_seq)?;
    let prompt_len = layout.tokens.len();
    let mut tokens = layout.tokens;
    let continuation = format!(" {answer}\n");
    tokens.extend(tokenizer.tokenize(&continuation)?);
    if tokens.len() > max_seq {
        return Err(ExtractError::PromptTooLong {
            len: tokens.len(),
            max: max_seq,
        });
    }
    Ok(LmSample {
        answer_span: (prompt_len, tokens.len()),
        tokens,
    })
}

/// Persisted per-layer, per-token representation vectors for a set of
/// evidence records; the probe's input. Payload is always f32.
#[derive(Debug, Clone, PartialEq)]
pub struct RepCache {
    pub knowledge_id: String,
    pub tap: Tap,
    pub d_model: usize,
    /// Model layer indices covered, in storage order.
    pub layers: Vec<usize>,
    /// One single-character string per question token.
    pub token_texts: Vec<String>,
    pub token_roles: Vec<TokenRole>,
    /// Class label per record.
    pub labels: Vec<String>,
    /// Split per record.
    pub splits: Vec<Split>,
    /// Record-major, then layer, then token, then dimension.
    pub data: Vec<f32>,
}

impl RepCache {
    pub fn n_records(&self) -> usize {
        self.labels.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.token_texts.len()
    }

    /// The representation vector for one (record, layer position, token).
    pub fn vector(&self, record: usize, layer_pos: usize, token: usize) -> &[f32] {
        let d = self.d_model;
        let idx = ((record * self.n_layers() + layer_pos) * self.n_tokens() + token) * d;
        &self.data[idx..idx + d]
    }

    /// Checks grid completeness and finiteness.
    pub fn validate(&self) -> Result<(), ExtractError> {
        let expected = self.n_records() * self.n_layers() * self.n_tokens() * self.d_model;
        if self.data.len() != expected {
            return Err(ExtractError::SizeMismatch {
                expected: expected * 4,
                found: self.data.len() * 4,
            });
        }
        if self.splits.len() != self.labels.len()
            || self.token_roles.len() != self.token_texts.len()
        {
            return Err(ExtractError::Header("metadata lengths disagree".to_string()));
        }
        if let Some(bad) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(ExtractError::NonFinite {
                record: bad / (self.n_layers() * self.n_tokens() * self.d_model).max(1),
            });
        }
        Ok(())
    }
}

/// Runs the model over every record and slices the requested tap at
/// question-token positions for the requested layers. Records are processed
/// in parallel; output order follows input order.
pub fn extract_representations<T: Scalar>(
    model: &Model<T>,
    records: &[EvidenceRecord],
    item: &KnowledgeItem,
    tap: Tap,
    layers: &[usize],
) -> Result<RepCache, ExtractError> {
    if records.is_empty() {
        return Err(ExtractError::EmptyInput("records"));
    }
    if layers.is_empty() {
        return Err(ExtractError::EmptyInput("layers"));
    }
    let n_layers = model.config().n_layers;
    let mut seen = std::collections::HashSet::new();
    for &l in layers {
        if l >= n_layers {
            return Err(ExtractError::LayerOutOfRange { layer: l, n_layers });
        }
        if !seen.insert(l) {
            return Err(ExtractError::DuplicateLayer(l));
        }
    }
    for (i, r) in records.iter().enumerate() {
        if r.knowledge_id != item.id {
            return Err(ExtractError::MixedKnowledge {
                index: i,
                expected: item.id.clone(),
                found: r.knowledge_id.clone(),
            });
        }
        if r.split.is_none() {
            return Err(ExtractError::MissingSplit { index: i });
        }
    }

    let tokenizer = Tokenizer;
    let d = model.config().d_model;
    let max_seq = model.config().max_seq;
    // The question is constant per item, so roles/texts come from the first
    // record's layout.
    let first_layout = build_prompt(
        &tokenizer,
        &records[0].text,
        &item.question,
        &item.entity_spans,
        max_seq,
    )?;
    let n_tokens = first_layout.question_len();

    let per_record: Result<Vec<Vec<f32>>, ExtractError> = records
        .par_iter()
        .enumerate()
        .map(|(ri, record)| {
            let layout = build_prompt(
                &tokenizer,
                &record.text,
                &item.question,
                &item.entity_spans,
                max_seq,
            )?;
            let (_, taps) = model.forward_with_taps(&layout.tokens)?;
            let mut out = Vec::with_capacity(layers.len() * n_tokens * d);
            let (q_start, q_end) = layout.question_span;
            for &layer in layers {
                let rec = &taps[layer];
                let source: &Array2<T> = match tap {
                    Tap::Block => &rec.block_out,
                    Tap::Attn => &rec.attn_out,
                    Tap::Mlp => &rec.mlp_out,
                };
                for pos in q_start..q_end {
                    for j in 0..d {
                        let v = source[(pos, j)].to_f64_lossy() as f32;
                        if !v.is_finite() {
                            return Err(ExtractError::NonFinite { record: ri });
                        }
                        out.push(v);
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let per_record = per_record?;

    let mut data = Vec::with_capacity(records.len() * layers.len() * n_tokens * d);
    for block in per_record {
        data.extend_from_slice(&block);
    }
    let cache = RepCache {
        knowledge_id: item.id.clone(),
        tap,
        d_model: d,
        layers: layers.to_vec(),
        token_texts: item.question.chars().map(|c| c.to_string()).collect(),
        token_roles: first_layout.token_roles,
        labels: records.iter().map(|r| r.class_label.clone()).collect(),
        splits: records.iter().map(|r| r.split.unwrap()).collect(),
        data,
    };
    cache.validate()?;
    Ok(cache)
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    knowledge_id: String,
    tap: Tap,
    d_model: usize,
    layers: Vec<usize>,
    n_records: usize,
    n_tokens: usize,
    token_texts: Vec<String>,
    token_roles: Vec<TokenRole>,
    labels: Vec<String>,
    splits: Vec<Split>,
}

/// Writes a cache: magic `RPC1`, u32 LE header length, JSON header, then the
/// f32 LE payload.
pub fn write_cache(cache: &RepCache, path: &Path) -> Result<(), ExtractError> {
    cache.validate()?;
    let header = CacheHeader {
        knowledge_id: cache.knowledge_id.clone(),
        tap: cache.tap,
        d_model: cache.d_model,
        layers: cache.layers.clone(),
        n_records: cache.n_records(),
        n_tokens: cache.n_tokens(),
        token_texts: cache.token_texts.clone(),
        token_roles: cache.token_roles.clone(),
        labels: cache.labels.clone(),
        splits: cache.splits.clone(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ExtractError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + cache.data.len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in &cache.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a cache back; the round trip is bit-exact.
pub fn read_cache(path: &Path) -> Result<RepCache, ExtractError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
        return Err(ExtractError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(ExtractError::Truncated {
            expected: header_len,
            found: body.len(),
        });
    }
    let header: CacheHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| ExtractError::Header(e.to_string()))?;
    if header.token_texts.len() != header.n_tokens
        || header.token_roles.len() != header.n_tokens
        || header.labels.len() != header.n_records
        || header.splits.len() != header.n_records
    {
        return Err(ExtractError::Header("metadata lengths disagree".into()));
    }
    let n_values = header.n_records * header.layers.len() * header.n_tokens * header.d_model;
    let expected = n_values * 4;
    let payload = &body[header_len..];
    if payload.len() < expected {
        return Err(ExtractError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(ExtractError::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let cache = RepCache {
        knowledge_id: header.knowledge_id,
        tap: header.tap,
        d_model: header.d_model,
        layers: header.layers,
        token_texts: header.token_texts,
        token_roles: header.token_roles,
        labels: header.labels,
        splits: header.splits,
        data,
    };
    cache.validate()?;
    Ok(cache)
}
