//! Next-token training: cached forward pass, hand-derived backward pass,
//! Adam over the flat parameter vector, and the epoch loop.

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{
    apply_rotary, attention_forward, norm_forward, silu_grad, AttnCache, Model, NormParams,
};
use super::{LmError, Norm};
use crate::scalar::Scalar;
use crate::seed::{rng, subseed, subseed_idx};
use rand::seq::SliceRandom;

/// One training sequence: prompt tokens with the answer continuation, plus
/// the token span `[start, end)` of that continuation (used for held-out
/// token accuracy, not for loss masking).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmSample {
    pub tokens: Vec<usize>,
    pub answer_span: (usize, usize),
}

/// Language-model training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Fraction of the corpus held out for the report's token accuracy.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            holdout_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Per-epoch losses (nats per token) and held-out answer-token accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_accuracy: f64,
}

struct LayerFwd<T> {
    xhat1: Array2<T>,
    r1: Array1<T>,
    h: Array2<T>,
    attn: AttnCache<T>,
    xhat2: Array2<T>,
    r2: Array1<T>,
    h2: Array2<T>,
    u: Array2<T>,
    act: Array2<T>,
}

struct FwdCache<T> {
    layers: Vec<LayerFwd<T>>,
    xhat_f: Array2<T>,
    r_f: Array1<T>,
    f: Array2<T>,
    logits: Array2<T>,
}

fn forward_train<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> FwdCache<T> {
    let cfg = &model.config;
    let mut x = model.embed(tokens);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in &model.layers {
        let (h, xhat1, r1) = norm_forward(&x, &layer.attn_norm, cfg.norm);
        let mut attn = AttnCache::default();
        let attn_out = attention_forward(&h, layer, cfg, 0, Some(&mut attn));
        let x_mid = &x + &attn_out;
        let (h2, xhat2, r2) = norm_forward(&x_mid, &layer.mlp_norm, cfg.norm);
        let u = h2.dot(&layer.w1);
        let act = u.mapv(super::model::silu);
        let mlp_out = act.dot(&layer.w2);
        let x_out = &x_mid + &mlp_out;
        layers.push(LayerFwd {
            xhat1,
            r1,
            h,
            attn,
            xhat2,
            r2,
            h2,
            u,
            act,
        });
        x = x_out;
    }
    let (f, xhat_f, r_f) = norm_forward(&x, &model.final_norm, cfg.norm);
    let logits = f.dot(&model.unembed);
    FwdCache {
        layers,
        xhat_f,
        r_f,
        f,
        logits,
    }
}

/// Mean next-token cross-entropy in nats over all predicted positions.
pub fn sequence_loss<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<T, LmError> {
    let cache = checked_forward(model, tokens)?;
    Ok(loss_from_logits(&cache.logits, tokens))
}

fn checked_forward<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<FwdCache<T>, LmError> {
    if tokens.len() < 2 {
        return Err(LmError::EmptySequence);
    }
    if tokens.len() > model.config.max_seq {
        return Err(LmError::SequenceTooLong {
            len: tokens.len(),
            max: model.config.max_seq,
        });
    }
    Ok(forward_train(model, tokens))
}

fn loss_from_logits<T: Scalar>(logits: &Array2<T>, tokens: &[usize]) -> T {
    let m = tokens.len() - 1;
    let mut total = T::zero();
    for t in 0..m {
        let row = logits.row(t);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        total += lse - row[tokens[t + 1]];
    }
    total / T::from_f64_lossy(m as f64)
}

/// Gradient of the row-wise softmax given upstream grad and probabilities.
fn softmax_backward<T: Scalar>(dprobs: &Array2<T>, probs: &Array2<T>) -> Array2<T> {
    let (n, m) = probs.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let mut inner = T::zero();
        for j in 0..m {
            inner += dprobs[(i, j)] * probs[(i, j)];
        }
        for j in 0..m {
            out[(i, j)] = probs[(i, j)] * (dprobs[(i, j)] - inner);
        }
    }
    out
}

/// Backward through a normalization layer. Accumulates parameter grads and
/// returns the input gradient.
fn norm_backward<T: Scalar>(
    dy: &Array2<T>,
    xhat: &Array2<T>,
    denom: &Array1<T>,
    params: &NormParams<T>,
    grads: &mut NormParams<T>,
    kind: Norm,
) -> Array2<T> {
    let (n, d) = dy.dim();
    let dim = T::from_f64_lossy(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        // Parameter grads.
        for j in 0..d {
            grads.gain[j] += dy[(i, j)] * xhat[(i, j)];
            if let Some(b) = grads.bias.as_mut() {
                b[j] += dy[(i, j)];
            }
        }
        let r = denom[i];
        match kind {
            Norm::Rms => {
                let mut s = T::zero();
                for j in 0..d {
                    s += dy[(i, j)] * params.gain[j] * xhat[(i, j)];
                }
                for j in 0..d {
                    let dxh = dy[(i, j)] * params.gain[j];
                    dx[(i, j)] = (dxh - xhat[(i, j)] * s / dim) / r;
                }
            }
            Norm::LayerNorm => {
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for j in 0..d {
                    let dxh = dy[(i, j)] * params.gain[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xhat[(i, j)];
                }
                mean_dxh /= dim;
                mean_dxh_xh /= dim;
                for j in 0..d {
                    let dxh = dy[(i, j)] * params.gain[j];
                    dx[(i, j)] = (dxh - mean_dxh - xhat[(i, j)] * mean_dxh_xh) / r;
                }
            }
        }
    }
    dx
}

/// Loss and parameter gradients (manifest order) for one sequence.
pub fn loss_and_param_grads<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
) -> Result<(T, Model<T>), LmError> {
    let cfg = &model.config;
    let cache = checked_forward(model, tokens)?;
    let loss = loss_from_logits(&cache.logits, tokens);
    let mut grads = Model::zeros_like(cfg);

    let n = tokens.len();
    let m = n - 1;
    let inv_m = T::from_f64_lossy(1.0 / m as f64);
    let mut dlogits = Array2::zeros(cache.logits.dim());
    for t in 0..m {
        let row = cache.logits.row(t);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        for e in &mut exps {
            *e /= sum;
        }
        for (j, p) in exps.iter().enumerate() {
            dlogits[(t, j)] = *p * inv_m;
        }
        dlogits[(t, tokens[t + 1])] -= inv_m;
    }

    // Output head.
    grads.unembed = cache.f.t().dot(&dlogits);
    let df = dlogits.dot(&model.unembed.t());
    let mut dx = norm_backward(
        &df,
        &cache.xhat_f,
        &cache.r_f,
        &model.final_norm,
        &mut grads.final_norm,
        cfg.norm,
    );

    let dh_dim = cfg.head_dim();
    let scale = T::from_f64_lossy(1.0 / (dh_dim as f64).sqrt());
    for (li, layer) in model.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // MLP branch: x_out = x_mid + act. w2
        let dmlp_out = &dx;
        lg.w2 = lc.act.t().dot(dmlp_out);
        let dact = dmlp_out.dot(&layer.w2.t());
        let mut du = dact;
        du.zip_mut_with(&lc.u, |g, &u| *g = *g * silu_grad(u));
        lg.w1 = lc.h2.t().dot(&du);
        let dh2 = du.dot(&layer.w1.t());
        let dx_mid_norm = norm_backward(
            &dh2,
            &lc.xhat2,
            &lc.r2,
            &layer.mlp_norm,
            &mut lg.mlp_norm,
            cfg.norm,
        );
        let dx_mid = &dx + &dx_mid_norm;

        // Attention branch: x_mid = x_in + ctx. wo
        let dattn_out = &dx_mid;
        lg.wo = lc.attn.ctx.t().dot(dattn_out);
        let dctx = dattn_out.dot(&layer.wo.t());
        let mut dq = Array2::zeros((n, cfg.d_model));
        let mut dk = Array2::zeros((n, cfg.d_model));
        let mut dv = Array2::zeros((n, cfg.d_model));
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dh_dim..(head + 1) * dh_dim];
            let dctx_h = dctx.slice(cols);
            let probs = &lc.attn.probs[head];
            let vh = lc.attn.v.slice(cols);
            let qh = lc.attn.q.slice(cols);
            let kh = lc.attn.k.slice(cols);
            let dprobs = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
            let mut dscores = softmax_backward(&dprobs, probs);
            dscores.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        }
        apply_rotary(&mut dq, cfg, 0, true);
        apply_rotary(&mut dk, cfg, 0, true);
        lg.wq = lc.h.t().dot(&dq);
        lg.wk = lc.h.t().dot(&dk);
        lg.wv = lc.h.t().dot(&dv);
        let mut dh = dq.dot(&layer.wq.t());
        dh = dh + dk.dot(&layer.wk.t());
        dh = dh + dv.dot(&layer.wv.t());
        let dx_in_norm = norm_backward(
            &dh,
            &lc.xhat1,
            &lc.r1,
            &layer.attn_norm,
            &mut lg.attn_norm,
            cfg.norm,
        );
        dx = &dx_mid + &dx_in_norm;
    }

    // Embeddings.
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = grads.tok_emb.row_mut(tok);
        row += &dx.row(t);
        if let Some(pe) = grads.pos_emb.as_mut() {
            let mut prow = pe.row_mut(t);
            prow += &dx.row(t);
        }
    }

    Ok((loss, grads))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step<T: Scalar>(&mut self, theta: &mut [T], grad: &[f64], hyper: &TrainHyper) {
        self.t += 1;
        let b1 = hyper.beta1;
        let b2 = hyper.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let delta = hyper.learning_rate * mhat / (vhat.sqrt() + hyper.epsilon);
            theta[i] = theta[i] - T::from_f64_lossy(delta);
        }
    }
}

/// Trains the model with mini-batch Adam on next-token cross-entropy.
///
/// The loss runs over every position of every sequence; the report's
/// accuracy is the argmax token accuracy over the answer spans of the
/// held-out fraction (or the whole corpus when the fraction rounds to zero).
pub fn train_lm<T: Scalar>(
    model: &mut Model<T>,
    corpus: &[LmSample],
    hyper: &TrainHyper,
) -> Result<TrainReport, LmError> {
    if corpus.is_empty() {
        return Err(LmError::InvalidConfig("empty training corpus".into()));
    }
    for s in corpus {
        if s.tokens.len() < 2 {
            return Err(LmError::EmptySequence);
        }
        if s.tokens.len() > model.config.max_seq {
            return Err(LmError::SequenceTooLong {
                len: s.tokens.len(),
                max: model.config.max_seq,
            });
        }
    }
    let n_params = Model::<T>::num_params(&model.config);
    let mut flat = model.to_flat();
    let mut adam = Adam::new(n_params);
    let mut grad_acc: Vec<f64> = vec![0.0; n_params];
    let mut sample_flat: Vec<T> = vec![T::zero(); n_params];

    // Held-out indices for the report accuracy.
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng(subseed(hyper.seed, &["holdout"])));
    let n_hold = ((hyper.holdout_fraction * corpus.len() as f64).floor() as usize)
        .min(corpus.len().saturating_sub(1));
    let (holdout, train_idx) = order.split_at(n_hold);
    let holdout: Vec<usize> = holdout.to_vec();
    let mut train_idx: Vec<usize> = train_idx.to_vec();

    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        train_idx.shuffle(&mut rng(subseed_idx(subseed(hyper.seed, &["epoch"]), &[epoch as u64])));
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in train_idx.chunks(hyper.batch_size.max(1)) {
            let results: Result<Vec<(T, Model<T>)>, LmError> = chunk
                .par_iter()
                .map(|&idx| loss_and_param_grads(&*model, &corpus[idx].tokens))
                .collect();
            let results = results?;
            grad_acc.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / chunk.len() as f64;
            for (loss, grads) in &results {
                let l = loss.to_f64_lossy();
                if !l.is_finite() {
                    return Err(LmError::Diverged { epoch });
                }
                loss_sum += l;
                loss_count += 1;
                sample_flat.iter_mut().for_each(|g| *g = T::zero());
                grads.add_flat_into(&mut sample_flat);
                for (acc, g) in grad_acc.iter_mut().zip(&sample_flat) {
                    *acc += g.to_f64_lossy() * inv;
                }
            }
            if hyper.grad_clip > 0.0 {
                let norm: f64 = grad_acc.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > hyper.grad_clip {
                    let scale = hyper.grad_clip / norm;
                    grad_acc.iter_mut().for_each(|g| *g *= scale);
                }
            }
            adam.step(&mut flat, &grad_acc, hyper);
            model.set_from_flat(&flat);
        }
        let epoch_loss = loss_sum / loss_count.max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(LmError::Diverged { epoch });
        }
        epoch_losses.push(epoch_loss);
    }

    let eval_idx: &[usize] = if holdout.is_empty() { &train_idx } else { &holdout };
    let final_accuracy = answer_token_accuracy(model, corpus, eval_idx)?;
    Ok(TrainReport {
        epoch_losses,
        final_accuracy,
    })
}

/// Teacher-forced argmax accuracy over the answer spans of the given samples.
pub fn answer_token_accuracy<T: Scalar>(
    model: &Model<T>,
    corpus: &[LmSample],
    indices: &[usize],
) -> Result<f64, LmError> {
    let per_sample: Result<Vec<(usize, usize)>, LmError> = indices
        .par_iter()
        .map(|&idx| {
            let sample = &corpus[idx];
            let (logits, _) = model.forward_with_taps(&sample.tokens)?;
            let (start, end) = sample.answer_span;
            let mut hit = 0usize;
            let mut total = 0usize;
            for t in start.max(1)..end {
                let row = logits.row(t - 1);
                let mut best = 0usize;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                total += 1;
                if best == sample.tokens[t] {
                    hit += 1;
                }
            }
            Ok((hit, total))
        })
        .collect();
    let per_sample = per_sample?;
    let hits: usize = per_sample.iter().map(|p| p.0).sum();
    let total: usize = per_sample.iter().map(|p| p.1).sum();
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}
