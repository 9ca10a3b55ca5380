//! The restricted linear-probe family and its scoring: accuracy, predictive
//! V-entropy, conditional V-entropy, and V-usable information per
//! (layer, tap, token) cell.
//!
//! The probe family is linear-softmax classifiers trained with mini-batch
//! Adam on the clamped cross-entropy `-log2(softmax(Wx + b)[y] + eps)`; the
//! infimum in the entropy definitions is approximated by the final-epoch
//! solution of a fixed 15-epoch budget. The clamp applies inside the
//! training loss as well as at evaluation, keeping both objectives
//! identical.

use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Split;
use crate::extract::{RepCache, Tap, TokenRole};
use crate::scalar::Scalar;
use crate::seed::{rng, subseed, subseed_idx};
use rand::seq::SliceRandom;

/// Probe training hyperparameters; defaults are the published protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// The log clamp: probabilities get this added before `log2`.
    pub clamp: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 15,
            seed: 0,
            clamp: 0.01,
        }
    }
}

impl ProbeHyper {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.batch_size == 0
            || self.epochs == 0
            || self.learning_rate <= 0.0
            || self.beta1 <= 0.0
            || self.beta2 <= 0.0
            || self.epsilon <= 0.0
            || self.clamp <= 0.0
        {
            return Err(ProbeError::InvalidHyper);
        }
        Ok(())
    }
}

/// Errors raised by probe training and scoring.
#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe hyperparameters must all be positive")]
    InvalidHyper,
    #[error("probe diverged")]
    Diverged,
    #[error("fewer classes in labels than K: missing {missing:?}")]
    MissingClasses { missing: Vec<String> },
    #[error("label `{0}` not among the probe's classes")]
    UnknownLabel(String),
    #[error("representation dimension mismatch: probe expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least K={k} training samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("labels must be non-empty")]
    EmptyLabels,
    #[error("train and test label class sets differ")]
    ClassSetMismatch,
    #[error("non-finite representation input")]
    NonFiniteInput,
    #[error("cache holds no {0:?} records")]
    MissingSplit(Split),
    #[error("representation/label count mismatch: {reps} reps, {labels} labels")]
    CountMismatch { reps: usize, labels: usize },
}

/// Trained linear classifier from the restricted family: a K x d weight
/// matrix, a K bias vector, and the class-label order.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub classes: Vec<String>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn class_index(&self, label: &str) -> Result<usize, ProbeError> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| ProbeError::UnknownLabel(label.to_string()))
    }

    /// Softmax class probabilities for one representation vector.
    pub fn predict_proba(&self, x: &[T]) -> Result<Vec<T>, ProbeError> {
        if x.len() != self.dim() {
            return Err(ProbeError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut z: Vec<T> = (0..self.num_classes())
            .map(|k| {
                let mut acc = self.bias[k];
                for (j, &xj) in x.iter().enumerate() {
                    acc += self.weight[(k, j)] * xj;
                }
                acc
            })
            .collect();
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in &mut z {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut z {
            *v /= sum;
        }
        Ok(z)
    }

    /// Argmax prediction; ties break toward the lowest class index.
    pub fn predict(&self, x: &[T]) -> Result<usize, ProbeError> {
        let p = self.predict_proba(x)?;
        let mut best = 0usize;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

/// Sorted unique labels; fixes the class order used everywhere.
pub fn class_order(labels: &[String]) -> Vec<String> {
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();
    classes
}

fn label_indices(labels: &[String], classes: &[String]) -> Result<Vec<usize>, ProbeError> {
    labels
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| ProbeError::UnknownLabel(l.clone()))
        })
        .collect()
}

/// Minimizes the mean clamped cross-entropy with mini-batch Adam and
/// seed-deterministic shuffling; returns the final-epoch parameters.
pub fn train_probe<T: Scalar>(
    reps: &Array2<T>,
    labels: &[String],
    classes: &[String],
    hyper: &ProbeHyper,
) -> Result<LinearProbe<T>, ProbeError> {
    hyper.validate()?;
    if labels.is_empty() {
        return Err(ProbeError::EmptyLabels);
    }
    if reps.nrows() != labels.len() {
        return Err(ProbeError::CountMismatch {
            reps: reps.nrows(),
            labels: labels.len(),
        });
    }
    let k = classes.len();
    if labels.len() < k {
        return Err(ProbeError::TooFewSamples {
            n: labels.len(),
            k,
        });
    }
    let missing: Vec<String> = classes
        .iter()
        .filter(|c| !labels.contains(c))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(ProbeError::MissingClasses { missing });
    }
    if reps.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFiniteInput);
    }
    let y = label_indices(labels, classes)?;
    let d = reps.ncols();
    let n = reps.nrows();

    let mut probe = LinearProbe {
        weight: Array2::zeros((k, d)),
        bias: Array1::zeros(k),
        classes: classes.to_vec(),
    };
    // Adam state over [weight rows..., bias], kept in f64.
    let n_params = k * d + k;
    let mut m = vec![0.0f64; n_params];
    let mut v = vec![0.0f64; n_params];
    let mut t_step = 0u64;
    let ln2 = std::f64::consts::LN_2;
    let eps_clamp = T::from_f64_lossy(hyper.clamp);

    let mut order: Vec<usize> = (0..n).collect();
    let epoch_seed = subseed(hyper.seed, &["probe-epoch"]);
    let mut dz = vec![T::zero(); k];
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng(subseed_idx(epoch_seed, &[epoch as u64])));
        for batch in order.chunks(hyper.batch_size) {
            let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
            let mut gw = Array2::<T>::zeros((k, d));
            let mut gb = Array1::<T>::zeros(k);
            for &idx in batch {
                let x: Vec<T> = reps.row(idx).to_vec();
                let p = probe.predict_proba(&x)?;
                let py = p[y[idx]];
                let loss = -((py + eps_clamp).to_f64_lossy()).log2();
                if !loss.is_finite() {
                    return Err(ProbeError::Diverged);
                }
                // d/dz_j of -log2(p_y + eps) = -p_y (delta_yj - p_j) / (ln2 (p_y + eps))
                let denom = T::from_f64_lossy(ln2) * (py + eps_clamp);
                for j in 0..k {
                    let delta = if j == y[idx] { T::one() } else { T::zero() };
                    dz[j] = -(py * (delta - p[j])) / denom * inv;
                }
                for j in 0..k {
                    if dz[j] != T::zero() {
                        for c in 0..d {
                            gw[(j, c)] += dz[j] * x[c];
                        }
                        gb[j] += dz[j];
                    }
                }
            }
            // Adam step.
            t_step += 1;
            let bc1 = 1.0 - hyper.beta1.powi(t_step as i32);
            let bc2 = 1.0 - hyper.beta2.powi(t_step as i32);
            let mut apply = |param: &mut T, grad: f64, slot: usize| {
                m[slot] = hyper.beta1 * m[slot] + (1.0 - hyper.beta1) * grad;
                v[slot] = hyper.beta2 * v[slot] + (1.0 - hyper.beta2) * grad * grad;
                let mhat = m[slot] / bc1;
                let vhat = v[slot] / bc2;
                *param =
                    *param - T::from_f64_lossy(hyper.learning_rate * mhat / (vhat.sqrt() + hyper.epsilon));
            };
            for j in 0..k {
                for c in 0..d {
                    apply(&mut probe.weight[(j, c)], gw[(j, c)].to_f64_lossy(), j * d + c);
                }
            }
            for j in 0..k {
                apply(&mut probe.bias[j], gb[j].to_f64_lossy(), k * d + j);
            }
        }
    }
    if probe.weight.iter().any(|w| !w.is_finite()) || probe.bias.iter().any(|b| !b.is_finite()) {
        return Err(ProbeError::Diverged);
    }
    Ok(probe)
}

/// Mean clamped log-loss of the probe's train-time objective on a dataset;
/// exposed for gradient checking.
pub fn probe_loss<T: Scalar>(
    probe: &LinearProbe<T>,
    reps: &Array2<T>,
    label_idx: &[usize],
    clamp: f64,
) -> Result<f64, ProbeError> {
    let mut total = 0.0;
    for (i, &yi) in label_idx.iter().enumerate() {
        let p = probe.predict_proba(&reps.row(i).to_vec())?;
        total += -(p[yi].to_f64_lossy() + clamp).log2();
    }
    Ok(total / label_idx.len() as f64)
}

/// Predictive V-entropy: trains the probe family on zero-input vectors
/// against the train labels, then returns the mean `-log2(p(y) + eps)` over
/// the test labels.
pub fn null_v_entropy(
    labels_train: &[String],
    labels_test: &[String],
    hyper: &ProbeHyper,
) -> Result<f64, ProbeError> {
    if labels_train.is_empty() || labels_test.is_empty() {
        return Err(ProbeError::EmptyLabels);
    }
    let classes = class_order(labels_train);
    if class_order(labels_test) != classes {
        return Err(ProbeError::ClassSetMismatch);
    }
    // Zero input: only the bias trains, so d = 1 suffices.
    let reps = Array2::<f64>::zeros((labels_train.len(), 1));
    let probe = train_probe(&reps, labels_train, &classes, hyper)?;
    let zero = [0.0f64];
    let p = probe.predict_proba(&zero)?;
    let mut total = 0.0;
    for label in labels_test {
        let idx = probe.class_index(label)?;
        total += -(p[idx] + hyper.clamp).log2();
    }
    Ok(total / labels_test.len() as f64)
}

/// Conditional V-entropy: mean over the test set of `-log2(p(y|x) + eps)`.
pub fn conditional_v_entropy<T: Scalar>(
    probe: &LinearProbe<T>,
    reps: &Array2<T>,
    labels: &[String],
    clamp: f64,
) -> Result<f64, ProbeError> {
    if labels.is_empty() {
        return Err(ProbeError::EmptyLabels);
    }
    if reps.nrows() != labels.len() {
        return Err(ProbeError::CountMismatch {
            reps: reps.nrows(),
            labels: labels.len(),
        });
    }
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let idx = probe.class_index(label)?;
        let p = probe.predict_proba(&reps.row(i).to_vec())?;
        total += -(p[idx].to_f64_lossy() + clamp).log2();
    }
    Ok(total / labels.len() as f64)
}

/// V-usable information in bits.
pub fn v_information(h_y: f64, h_y_given_r: f64) -> f64 {
    h_y - h_y_given_r
}

/// Exact-match accuracy of argmax predictions.
pub fn eval_accuracy<T: Scalar>(
    probe: &LinearProbe<T>,
    reps: &Array2<T>,
    labels: &[String],
) -> Result<f64, ProbeError> {
    if labels.is_empty() {
        return Err(ProbeError::EmptyLabels);
    }
    if reps.nrows() != labels.len() {
        return Err(ProbeError::CountMismatch {
            reps: reps.nrows(),
            labels: labels.len(),
        });
    }
    let mut hits = 0usize;
    for (i, label) in labels.iter().enumerate() {
        let truth = probe.class_index(label)?;
        if probe.predict(&reps.row(i).to_vec())? == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// The theoretical cap on v_info for a K-class task under clamp `eps`,
/// excluding optimizer slack.
pub fn v_info_ceiling(k: usize, clamp: f64) -> f64 {
    -(1.0 / k as f64 + clamp).log2() + (1.0 + clamp).log2()
}

/// One grid cell's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub tap: Tap,
    pub token_index: usize,
    pub token_role: TokenRole,
    pub accuracy: f64,
    pub h_y: f64,
    pub h_y_given_r: f64,
    pub v_info: f64,
    /// Set when the cell could not be scored; metrics are NaN then.
    pub error: Option<String>,
}

impl ProbeResult {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

fn cell_matrix<T: Scalar>(
    cache: &RepCache,
    indices: &[usize],
    layer_pos: usize,
    token: usize,
) -> Array2<T> {
    let d = cache.d_model;
    let mut out = Array2::zeros((indices.len(), d));
    for (row, &rec) in indices.iter().enumerate() {
        let src = cache.vector(rec, layer_pos, token);
        for j in 0..d {
            out[(row, j)] = T::from_f64_lossy(src[j] as f64);
        }
    }
    out
}

/// Trains and scores a fresh probe for every (layer, token) cell of a cache.
///
/// `h_y` is computed once per cache from labels alone. Per-cell RNG streams
/// derive from hash(seed, layer, token, tap), so results are independent of
/// evaluation order and thread count. Cells that cannot be scored (e.g.
/// single-class train labels) come back with an error flag instead of
/// failing the grid. Output is layer-major, then token.
pub fn probe_grid<T: Scalar>(
    cache: &RepCache,
    hyper: &ProbeHyper,
) -> Result<Vec<ProbeResult>, ProbeError> {
    probe_grid_multi::<T>(cache, hyper, 1)
}

/// Multi-seed variant: metrics are means over `n_seeds` independent probe
/// seeds per cell (the reported single-seed protocol is `n_seeds = 1`).
pub fn probe_grid_multi<T: Scalar>(
    cache: &RepCache,
    hyper: &ProbeHyper,
    n_seeds: usize,
) -> Result<Vec<ProbeResult>, ProbeError> {
    hyper.validate()?;
    let n_seeds = n_seeds.max(1);
    let train_idx: Vec<usize> = (0..cache.n_records())
        .filter(|&i| cache.splits[i] == Split::Train)
        .collect();
    let test_idx: Vec<usize> = (0..cache.n_records())
        .filter(|&i| cache.splits[i] == Split::Test)
        .collect();
    if train_idx.is_empty() {
        return Err(ProbeError::MissingSplit(Split::Train));
    }
    if test_idx.is_empty() {
        return Err(ProbeError::MissingSplit(Split::Test));
    }
    let train_labels: Vec<String> = train_idx.iter().map(|&i| cache.labels[i].clone()).collect();
    let test_labels: Vec<String> = test_idx.iter().map(|&i| cache.labels[i].clone()).collect();
    let classes = class_order(&cache.labels);

    // Labels are shared by every cell; one null probe per seed stream.
    let mut h_y_sum = 0.0;
    for s in 0..n_seeds {
        let null_hyper = ProbeHyper {
            seed: subseed_idx(subseed(hyper.seed, &["null"]), &[s as u64]),
            ..hyper.clone()
        };
        h_y_sum += null_v_entropy(&train_labels, &test_labels, &null_hyper)?;
    }
    let h_y = h_y_sum / n_seeds as f64;

    let cells: Vec<(usize, usize)> = (0..cache.n_layers())
        .flat_map(|lp| (0..cache.n_tokens()).map(move |t| (lp, t)))
        .collect();

    let results: Vec<ProbeResult> = cells
        .par_iter()
        .map(|&(layer_pos, token)| {
            let layer = cache.layers[layer_pos];
            let role = cache.token_roles[token];
            let mut acc_sum = 0.0;
            let mut h_cond_sum = 0.0;
            let mut error = None;
            for s in 0..n_seeds {
                let cell_seed = subseed_idx(
                    hyper.seed,
                    &[layer as u64, token as u64, cache.tap.id(), s as u64],
                );
                let cell_hyper = ProbeHyper {
                    seed: cell_seed,
                    ..hyper.clone()
                };
                let train_reps = cell_matrix::<T>(cache, &train_idx, layer_pos, token);
                let test_reps = cell_matrix::<T>(cache, &test_idx, layer_pos, token);
                match train_probe(&train_reps, &train_labels, &classes, &cell_hyper).and_then(
                    |probe| {
                        let acc = eval_accuracy(&probe, &test_reps, &test_labels)?;
                        let h_cond = conditional_v_entropy(
                            &probe,
                            &test_reps,
                            &test_labels,
                            cell_hyper.clamp,
                        )?;
                        Ok((acc, h_cond))
                    },
                ) {
                    Ok((acc, h_cond)) => {
                        acc_sum += acc;
                        h_cond_sum += h_cond;
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            match error {
                None => {
                    let accuracy = acc_sum / n_seeds as f64;
                    let h_cond = h_cond_sum / n_seeds as f64;
                    ProbeResult {
                        layer,
                        tap: cache.tap,
                        token_index: token,
                        token_role: role,
                        accuracy,
                        h_y,
                        h_y_given_r: h_cond,
                        v_info: v_information(h_y, h_cond),
                        error: None,
                    }
                }
                Some(msg) => ProbeResult {
                    layer,
                    tap: cache.tap,
                    token_index: token,
                    token_role: role,
                    accuracy: f64::NAN,
                    h_y,
                    h_y_given_r: f64::NAN,
                    v_info: f64::NAN,
                    error: Some(msg),
                },
            }
        })
        .collect();
    Ok(results)
}

/// Writes the results CSV: deterministic row order (layer-major, then
/// token), fixed-precision floats, error cells with empty metric fields.
pub fn write_results_csv(
    results: &[ProbeResult],
    knowledge_id: &str,
    scenario: &str,
    token_texts: &[String],
    path: &Path,
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "knowledge_id",
        "scenario",
        "tap",
        "layer",
        "token_index",
        "token_text",
        "token_role",
        "accuracy",
        "h_y",
        "h_y_given_r",
        "v_info",
        "error_flag",
    ])?;
    let fmt = |v: f64| {
        if v.is_finite() {
            format!("{v:.6}")
        } else {
            String::new()
        }
    };
    for r in results {
        w.write_record([
            knowledge_id,
            scenario,
            r.tap.name(),
            &r.layer.to_string(),
            &r.token_index.to_string(),
            token_texts
                .get(r.token_index)
                .map(String::as_str)
                .unwrap_or(""),
            r.token_role.name(),
            &fmt(r.accuracy),
            &fmt(r.h_y),
            &fmt(r.h_y_given_r),
            &fmt(r.v_info),
            if r.error.is_some() { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    Ok(())
}
