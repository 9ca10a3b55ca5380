//! Greedy decoding with a per-layer KV cache, and exact-match QA scoring.

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;

use super::model::{attend, mlp_forward, norm_forward, project_qkv, Model};
use super::{LmError, Tokenizer};
use crate::scalar::Scalar;

/// Per-layer key/value history for incremental decoding.
struct KvCache<T> {
    k: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    len: usize,
}

fn argmax_row<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0usize;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Runs the prompt once, filling the cache; returns the last position's
/// logits.
fn prefill<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<(Vec<T>, KvCache<T>), LmError> {
    let cfg = &model.config;
    let mut x = model.embed(tokens);
    let mut cache = KvCache {
        k: Vec::with_capacity(cfg.n_layers),
        v: Vec::with_capacity(cfg.n_layers),
        len: tokens.len(),
    };
    for layer in &model.layers {
        let (h, _, _) = norm_forward(&x, &layer.attn_norm, cfg.norm);
        let (q, k, v) = project_qkv(&h, layer, cfg, 0);
        let ctx = attend(&q, &k, &v, cfg, 0, None);
        let attn_out = ctx.dot(&layer.wo);
        let x_mid = &x + &attn_out;
        let (h2, _, _) = norm_forward(&x_mid, &layer.mlp_norm, cfg.norm);
        let mlp_out = mlp_forward(&h2, layer);
        x = &x_mid + &mlp_out;
        cache.k.push(k);
        cache.v.push(v);
    }
    let (f, _, _) = norm_forward(&x, &model.final_norm, cfg.norm);
    let logits = f.dot(&model.unembed);
    let last = logits.row(tokens.len() - 1).to_vec();
    Ok((last, cache))
}

/// Advances the cache by one token at absolute position `pos`; returns the
/// new logits row.
fn decode_step<T: Scalar>(
    model: &Model<T>,
    cache: &mut KvCache<T>,
    token: usize,
    pos: usize,
) -> Result<Vec<T>, LmError> {
    let cfg = &model.config;
    if pos >= cfg.max_seq {
        return Err(LmError::SequenceTooLong {
            len: pos + 1,
            max: cfg.max_seq,
        });
    }
    let mut x = model.embed(&[token]);
    if let Some(pe) = &model.pos_emb {
        // embed() added the row-0 position; swap in the true position.
        let mut row = x.row_mut(0);
        row -= &pe.row(0);
        row += &pe.row(pos);
    }
    for (li, layer) in model.layers.iter().enumerate() {
        let (h, _, _) = norm_forward(&x, &layer.attn_norm, cfg.norm);
        let (q, k_new, v_new) = project_qkv(&h, layer, cfg, pos);
        let k_all = concatenate(Axis(0), &[cache.k[li].view(), k_new.view()])
            .expect("kv shapes compatible");
        let v_all = concatenate(Axis(0), &[cache.v[li].view(), v_new.view()])
            .expect("kv shapes compatible");
        let ctx = attend(&q, &k_all, &v_all, cfg, pos, None);
        let attn_out = ctx.dot(&layer.wo);
        let x_mid = &x + &attn_out;
        let (h2, _, _) = norm_forward(&x_mid, &layer.mlp_norm, cfg.norm);
        let mlp_out = mlp_forward(&h2, layer);
        x = &x_mid + &mlp_out;
        cache.k[li] = k_all;
        cache.v[li] = v_all;
    }
    cache.len = pos + 1;
    let (f, _, _) = norm_forward(&x, &model.final_norm, cfg.norm);
    let logits = f.dot(&model.unembed);
    Ok(logits.row(0).to_vec())
}

/// Greedy decoding from a prompt until the newline stop token or `max_len`
/// generated characters; returns the trimmed answer text.
pub fn generate_answer<T: Scalar>(
    model: &Model<T>,
    prompt_tokens: &[usize],
    max_len: usize,
) -> Result<String, LmError> {
    if prompt_tokens.is_empty() {
        return Err(LmError::EmptySequence);
    }
    if prompt_tokens.len() > model.config.max_seq {
        return Err(LmError::SequenceTooLong {
            len: prompt_tokens.len(),
            max: model.config.max_seq,
        });
    }
    let tok = Tokenizer;
    let (mut logits, mut cache) = prefill(model, prompt_tokens)?;
    let mut out = String::new();
    let mut pos = prompt_tokens.len();
    for _ in 0..max_len {
        let next = argmax_row(ndarray::ArrayView1::from(&logits));
        if next == Tokenizer::NEWLINE {
            break;
        }
        out.push(tok.id_to_char(next)?);
        if pos >= model.config.max_seq {
            break;
        }
        logits = decode_step(model, &mut cache, next, pos)?;
        pos += 1;
    }
    Ok(out.trim().to_string())
}

/// Fraction of prompts whose greedy answer exactly matches the expectation
/// (both sides whitespace-trimmed).
pub fn answer_accuracy<T: Scalar>(
    model: &Model<T>,
    eval_set: &[(Vec<usize>, String)],
    max_len: usize,
) -> Result<f64, LmError> {
    if eval_set.is_empty() {
        return Err(LmError::InvalidConfig("empty eval set".into()));
    }
    let hits: Result<Vec<bool>, LmError> = eval_set
        .par_iter()
        .map(|(prompt, expected)| {
            let answer = generate_answer(model, prompt, max_len)?;
            Ok(answer == expected.trim())
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}
