//! Model parameters, deterministic initialization, and forward passes.
//!
//! Pre-norm decoder blocks. The three tap points per layer are:
//! `attn_out` and `mlp_out` (sublayer outputs before residual addition) and
//! `block_out` (residual stream after the full layer), so for every layer
//! `block_out = block_in + attn_out + mlp_out` holds exactly by wiring.

use ndarray::{s, Array1, Array2};
use rand_distr::{Distribution, Normal};

use super::{LmError, ModelConfig, Norm, Positional};
use crate::scalar::Scalar;
use crate::seed::rng;

const ROTARY_BASE: f64 = 10_000.0;
const NORM_EPS: f64 = 1e-6;

/// Normalization parameters; bias present only for LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormParams<T> {
    pub gain: Array1<T>,
    pub bias: Option<Array1<T>>,
}

/// One transformer block's parameters. Linear layers carry no biases.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerParams<T> {
    pub attn_norm: NormParams<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub mlp_norm: NormParams<T>,
    pub w1: Array2<T>,
    pub w2: Array2<T>,
}

/// Per-layer representations captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapRecord<T> {
    pub layer: usize,
    /// Residual-stream value after the full layer, one row per position.
    pub block_out: Array2<T>,
    /// Attention sublayer output before residual addition.
    pub attn_out: Array2<T>,
    /// MLP sublayer output before residual addition.
    pub mlp_out: Array2<T>,
}

/// The decoder-only transformer under explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub(crate) config: ModelConfig,
    pub(crate) tok_emb: Array2<T>,
    pub(crate) pos_emb: Option<Array2<T>>,
    pub(crate) layers: Vec<LayerParams<T>>,
    pub(crate) final_norm: NormParams<T>,
    pub(crate) unembed: Array2<T>,
}

impl<T: Scalar> Model<T> {
    /// Seed-deterministic initialization from a validated config.
    pub fn init(config: &ModelConfig) -> Result<Self, LmError> {
        config.validate()?;
        let mut r = rng(config.seed);
        let std = Normal::new(0.0f64, 0.02).expect("valid std");
        // Residual-writing projections start smaller so depth does not blow
        // up the stream scale.
        let resid_std = Normal::new(0.0f64, 0.02 / (2.0 * config.n_layers as f64).sqrt())
            .expect("valid std");
        let mut draw = |rows: usize, cols: usize, dist: &Normal<f64>| {
            Array2::from_shape_fn((rows, cols), |_| T::from_f64_lossy(dist.sample(&mut r)))
        };

        let tok_emb = draw(config.vocab_size, config.d_model, &std);
        let pos_emb = match config.positional {
            Positional::Learned => Some(draw(config.max_seq, config.d_model, &std)),
            Positional::Rotary => None,
        };
        let norm_params = |cfg: &ModelConfig| NormParams {
            gain: Array1::from_elem(cfg.d_model, T::one()),
            bias: match cfg.norm {
                Norm::LayerNorm => Some(Array1::from_elem(cfg.d_model, T::zero())),
                Norm::Rms => None,
            },
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                attn_norm: norm_params(config),
                wq: draw(config.d_model, config.d_model, &std),
                wk: draw(config.d_model, config.d_model, &std),
                wv: draw(config.d_model, config.d_model, &std),
                wo: draw(config.d_model, config.d_model, &resid_std),
                mlp_norm: norm_params(config),
                w1: draw(config.d_model, config.d_ff, &std),
                w2: draw(config.d_ff, config.d_model, &resid_std),
            });
        }
        let final_norm = norm_params(config);
        let unembed = draw(config.d_model, config.vocab_size, &std);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Ordered (name, shape) list of every parameter tensor; fixes the flat
    /// layout used by the optimizer and the checkpoint payload.
    pub fn manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![("tok_emb".to_string(), vec![config.vocab_size, d])];
        if config.positional == Positional::Learned {
            out.push(("pos_emb".to_string(), vec![config.max_seq, d]));
        }
        let norm_entries = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.gain"), vec![d]));
            if config.norm == Norm::LayerNorm {
                out.push((format!("{prefix}.bias"), vec![d]));
            }
        };
        for i in 0..config.n_layers {
            norm_entries(&format!("layers.{i}.attn_norm"), &mut out);
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{i}.{w}"), vec![d, d]));
            }
            norm_entries(&format!("layers.{i}.mlp_norm"), &mut out);
            out.push((format!("layers.{i}.w1"), vec![d, config.d_ff]));
            out.push((format!("layers.{i}.w2"), vec![config.d_ff, d]));
        }
        norm_entries("final_norm", &mut out);
        out.push(("unembed".to_string(), vec![d, config.vocab_size]));
        out
    }

    /// Total parameter count; a pure function of the config.
    pub fn num_params(config: &ModelConfig) -> usize {
        Self::manifest(config)
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }

    fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![self.tok_emb.as_slice().unwrap()];
        if let Some(p) = &self.pos_emb {
            out.push(p.as_slice().unwrap());
        }
        for l in &self.layers {
            out.push(l.attn_norm.gain.as_slice().unwrap());
            if let Some(b) = &l.attn_norm.bias {
                out.push(b.as_slice().unwrap());
            }
            for w in [&l.wq, &l.wk, &l.wv, &l.wo] {
                out.push(w.as_slice().unwrap());
            }
            out.push(l.mlp_norm.gain.as_slice().unwrap());
            if let Some(b) = &l.mlp_norm.bias {
                out.push(b.as_slice().unwrap());
            }
            out.push(l.w1.as_slice().unwrap());
            out.push(l.w2.as_slice().unwrap());
        }
        out.push(self.final_norm.gain.as_slice().unwrap());
        if let Some(b) = &self.final_norm.bias {
            out.push(b.as_slice().unwrap());
        }
        out.push(self.unembed.as_slice().unwrap());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        out.push(self.tok_emb.as_slice_mut().unwrap());
        if let Some(p) = &mut self.pos_emb {
            out.push(p.as_slice_mut().unwrap());
        }
        for l in &mut self.layers {
            out.push(l.attn_norm.gain.as_slice_mut().unwrap());
            if let Some(b) = &mut l.attn_norm.bias {
                out.push(b.as_slice_mut().unwrap());
            }
            out.push(l.wq.as_slice_mut().unwrap());
            out.push(l.wk.as_slice_mut().unwrap());
            out.push(l.wv.as_slice_mut().unwrap());
            out.push(l.wo.as_slice_mut().unwrap());
            out.push(l.mlp_norm.gain.as_slice_mut().unwrap());
            if let Some(b) = &mut l.mlp_norm.bias {
                out.push(b.as_slice_mut().unwrap());
            }
            out.push(l.w1.as_slice_mut().unwrap());
            out.push(l.w2.as_slice_mut().unwrap());
        }
        out.push(self.final_norm.gain.as_slice_mut().unwrap());
        if let Some(b) = &mut self.final_norm.bias {
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.unembed.as_slice_mut().unwrap());
        out
    }

    /// Flattens every parameter in manifest order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(Self::num_params(&self.config));
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Adds every parameter (in manifest order) into `out`; used to
    /// accumulate gradients without intermediate allocations.
    pub fn add_flat_into(&self, out: &mut [T]) {
        let mut offset = 0;
        for t in self.tensors() {
            for (dst, src) in out[offset..offset + t.len()].iter_mut().zip(t) {
                *dst += *src;
            }
            offset += t.len();
        }
        debug_assert_eq!(offset, out.len());
    }

    /// Overwrites every parameter from a flat buffer in manifest order.
    pub fn set_from_flat(&mut self, flat: &[T]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        debug_assert_eq!(offset, flat.len());
    }

    /// A same-shape model with all parameters zero; gradient accumulator.
    pub(crate) fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let norm = |cfg: &ModelConfig| NormParams {
            gain: Array1::zeros(d),
            bias: match cfg.norm {
                Norm::LayerNorm => Some(Array1::zeros(d)),
                Norm::Rms => None,
            },
        };
        Self {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: match config.positional {
                Positional::Learned => Some(Array2::zeros((config.max_seq, d))),
                Positional::Rotary => None,
            },
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    attn_norm: norm(config),
                    wq: Array2::zeros((d, d)),
                    wk: Array2::zeros((d, d)),
                    wv: Array2::zeros((d, d)),
                    wo: Array2::zeros((d, d)),
                    mlp_norm: norm(config),
                    w1: Array2::zeros((d, config.d_ff)),
                    w2: Array2::zeros((config.d_ff, d)),
                })
                .collect(),
            final_norm: norm(config),
            unembed: Array2::zeros((d, config.vocab_size)),
        }
    }

    /// Embedding rows for a token sequence (plus learned positions if
    /// configured).
    pub fn embed(&self, tokens: &[usize]) -> Array2<T> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((tokens.len(), d));
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.tok_emb.row(t));
            if let Some(pos) = &self.pos_emb {
                row += &pos.row(i);
            }
        }
        x
    }

    fn check_sequence(&self, tokens: &[usize]) -> Result<(), LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(LmError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LmError::InvalidTokenId(bad));
        }
        Ok(())
    }

    /// Causal forward pass returning logits per position and one
    /// [`TapRecord`] per layer. Re-running is bit-identical.
    pub fn forward_with_taps(
        &self,
        tokens: &[usize],
    ) -> Result<(Array2<T>, Vec<TapRecord<T>>), LmError> {
        self.check_sequence(tokens)?;
        let mut x = self.embed(tokens);
        let mut taps = Vec::with_capacity(self.config.n_layers);
        for (i, layer) in self.layers.iter().enumerate() {
            let (h, _, _) = norm_forward(&x, &layer.attn_norm, self.config.norm);
            let attn_out = attention_forward(&h, layer, &self.config, 0, None);
            let x_mid = &x + &attn_out;
            let (h2, _, _) = norm_forward(&x_mid, &layer.mlp_norm, self.config.norm);
            let mlp_out = mlp_forward(&h2, layer);
            let x_out = &x_mid + &mlp_out;
            taps.push(TapRecord {
                layer: i,
                block_out: x_out.clone(),
                attn_out,
                mlp_out,
            });
            x = x_out;
        }
        let (f, _, _) = norm_forward(&x, &self.final_norm, self.config.norm);
        let logits = f.dot(&self.unembed);
        Ok((logits, taps))
    }
}

/// Normalizes each row; returns `(gained output, xhat, denominators)`.
/// `xhat` is the normalized value before affine scaling.
pub(crate) fn norm_forward<T: Scalar>(
    x: &Array2<T>,
    p: &NormParams<T>,
    kind: Norm,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let (n, d) = x.dim();
    let eps = T::from_f64_lossy(NORM_EPS);
    let dim = T::from_f64_lossy(d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut denom = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        match kind {
            Norm::Rms => {
                let ms = row.iter().map(|&v| v * v).sum::<T>() / dim;
                let r = (ms + eps).sqrt();
                denom[i] = r;
                for j in 0..d {
                    xhat[(i, j)] = row[j] / r;
                }
            }
            Norm::LayerNorm => {
                let mu = row.iter().copied().sum::<T>() / dim;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dim;
                let r = (var + eps).sqrt();
                denom[i] = r;
                for j in 0..d {
                    xhat[(i, j)] = (row[j] - mu) / r;
                }
            }
        }
    }
    let mut out = xhat.clone();
    for i in 0..n {
        for j in 0..d {
            out[(i, j)] = out[(i, j)] * p.gain[j];
            if let Some(b) = &p.bias {
                out[(i, j)] += b[j];
            }
        }
    }
    (out, xhat, denom)
}

/// Rotates q/k pairs in place. `positions[i]` is the absolute position of
/// row `i`; `inverse` applies the transpose rotation (used by backward).
pub(crate) fn apply_rotary<T: Scalar>(
    x: &mut Array2<T>,
    config: &ModelConfig,
    start_pos: usize,
    inverse: bool,
) {
    if config.positional != Positional::Rotary {
        return;
    }
    let dh = config.head_dim();
    let half = dh / 2;
    let n = x.nrows();
    for i in 0..n {
        let pos = (start_pos + i) as f64;
        for head in 0..config.n_heads {
            let base = head * dh;
            for p in 0..half {
                let theta = ROTARY_BASE.powf(-2.0 * p as f64 / dh as f64);
                let angle = pos * theta;
                let (sin, cos) = angle.sin_cos();
                let (sin, cos) = (T::from_f64_lossy(sin), T::from_f64_lossy(cos));
                let sin = if inverse { -sin } else { sin };
                let a = x[(i, base + 2 * p)];
                let b = x[(i, base + 2 * p + 1)];
                x[(i, base + 2 * p)] = a * cos - b * sin;
                x[(i, base + 2 * p + 1)] = a * sin + b * cos;
            }
        }
    }
}

/// Row-wise causal softmax over the leading `start_pos + row + 1` columns;
/// masked entries become exactly zero.
pub(crate) fn causal_softmax<T: Scalar>(scores: &mut Array2<T>, start_pos: usize) {
    let (n, m) = scores.dim();
    for i in 0..n {
        let allowed = (start_pos + i + 1).min(m);
        let mut row = scores.row_mut(i);
        let mut max = T::neg_infinity();
        for j in 0..allowed {
            if row[j] > max {
                max = row[j];
            }
        }
        let mut sum = T::zero();
        for j in 0..allowed {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum += e;
        }
        for j in 0..allowed {
            row[j] /= sum;
        }
        for j in allowed..m {
            row[j] = T::zero();
        }
    }
}

/// Projects normalized input to q/k/v with rotary applied (q/k rows start at
/// absolute position `start_pos`).
pub(crate) fn project_qkv<T: Scalar>(
    h: &Array2<T>,
    layer: &LayerParams<T>,
    config: &ModelConfig,
    start_pos: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let mut q = h.dot(&layer.wq);
    let mut k = h.dot(&layer.wk);
    let v = h.dot(&layer.wv);
    apply_rotary(&mut q, config, start_pos, false);
    apply_rotary(&mut k, config, start_pos, false);
    (q, k, v)
}

/// Scaled-dot-product causal attention. `q` holds rows for absolute
/// positions `q_start..`, `k`/`v` hold all positions from 0. Returns the
/// concatenated per-head context; optionally stores attention matrices.
pub(crate) fn attend<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    config: &ModelConfig,
    q_start: usize,
    mut probs_out: Option<&mut Vec<Array2<T>>>,
) -> Array2<T> {
    let (n, d) = q.dim();
    let dh = config.head_dim();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros((n, d));
    for head in 0..config.n_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        causal_softmax(&mut scores, q_start);
        let ctx_h = scores.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        if let Some(store) = probs_out.as_deref_mut() {
            store.push(scores);
        }
    }
    ctx
}

/// Full attention sublayer on normalized input `h` (pre-residual output).
/// When `cache` is supplied, intermediates are stored for backward.
pub(crate) fn attention_forward<T: Scalar>(
    h: &Array2<T>,
    layer: &LayerParams<T>,
    config: &ModelConfig,
    start_pos: usize,
    cache: Option<&mut AttnCache<T>>,
) -> Array2<T> {
    let (q, k, v) = project_qkv(h, layer, config, start_pos);
    let mut probs_store = Vec::with_capacity(config.n_heads);
    let want_cache = cache.is_some();
    let ctx = attend(
        &q,
        &k,
        &v,
        config,
        start_pos,
        if want_cache { Some(&mut probs_store) } else { None },
    );
    let out = ctx.dot(&layer.wo);
    if let Some(c) = cache {
        c.q = q;
        c.k = k;
        c.v = v;
        c.probs = probs_store;
        c.ctx = ctx;
    }
    out
}

/// Caches from the attention sublayer needed by backward.
#[derive(Debug, Clone)]
pub(crate) struct AttnCache<T> {
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub probs: Vec<Array2<T>>,
    pub ctx: Array2<T>,
}

impl<T: Scalar> Default for AttnCache<T> {
    fn default() -> Self {
        Self {
            q: Array2::zeros((0, 0)),
            k: Array2::zeros((0, 0)),
            v: Array2::zeros((0, 0)),
            probs: Vec::new(),
            ctx: Array2::zeros((0, 0)),
        }
    }
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// MLP sublayer on normalized input (pre-residual output).
pub(crate) fn mlp_forward<T: Scalar>(h: &Array2<T>, layer: &LayerParams<T>) -> Array2<T> {
    let mut u = h.dot(&layer.w1);
    u.mapv_inplace(silu);
    u.dot(&layer.w2)
}
