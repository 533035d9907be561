//! Logistic-regression entanglement prober.
//!
//! Features are the layer-L hidden state at the final prompt token of the
//! personalized prompt. Factual-degraded examples are the positive class,
//! personalized-beneficial the negative. Training standardizes features
//! per dimension and minimizes the L2-regularized logistic loss with
//! full-batch gradient descent plus Armijo backtracking — convex,
//! deterministic, and solver-free.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, TokenSequence};
use crate::contrast::{ContrastCorpus, ContrastiveExample, Label};
use crate::error::{Error, Result};
use crate::math::{log1p_exp, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_pos: usize,
    pub n_neg: usize,
    pub l2_strength: f64,
    pub seed: u64,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProberModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub layer: usize,
    pub training_meta: TrainingMeta,
}

impl ProberModel {
    /// p-hat for a raw (unstandardized) feature vector.
    pub fn predict(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.weights.len() {
            return Err(Error::DimMismatch {
                expected: self.weights.len(),
                got: feature.len(),
                context: "prober feature".into(),
            });
        }
        let mut z = self.bias;
        for i in 0..feature.len() {
            z += self.weights[i] * (feature[i] - self.feature_mean[i]) / self.feature_std[i];
        }
        Ok(sigmoid(z))
    }
}

/// Layer-L hidden state at the final prompt token of the with-history
/// prompt — the gate input, evaluated once per query before generation.
pub fn extract_feature(
    example: &ContrastiveExample,
    backend: &dyn Backend,
    layer: usize,
) -> Result<Vec<f64>> {
    let tokens = backend.encode(&example.prompt_with);
    extract_feature_from_tokens(&tokens, backend, layer)
}

pub fn extract_feature_from_tokens(
    prompt: &TokenSequence,
    backend: &dyn Backend,
    layer: usize,
) -> Result<Vec<f64>> {
    if layer == 0 || layer > backend.depth() {
        return Err(Error::LayerOutOfRange {
            layer,
            depth: backend.depth(),
        });
    }
    let record = backend.forward_with_states(prompt)?;
    let last = record.last_position(layer);
    Ok(record.states[layer][last].clone())
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub l2_strength: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub layer: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            l2_strength: 1e-2,
            seed: 0,
            max_iters: 5000,
            grad_tol: 1e-6,
            layer: 0,
        }
    }
}

/// Regularized logistic loss and its gradient. `labels` are 0/1. The bias
/// is unregularized. Public so verification code can difference the loss
/// against the analytic gradient.
pub fn loss_and_grad(
    features: &[Vec<f64>],
    labels: &[u8],
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = features.len() as f64;
    let d = weights.len();
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let z: f64 = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias;
        let y = f64::from(y);
        loss += log1p_exp(z) - y * z;
        let residual = sigmoid_raw(z) - y;
        for (g, v) in grad_w.iter_mut().zip(x) {
            *g += residual * v;
        }
        grad_b += residual;
    }
    loss /= n;
    grad_b /= n;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, grad_w, grad_b)
}

/// Unclamped sigmoid for gradients; the clamped variant would bias the
/// residuals at extreme scores.
fn sigmoid_raw(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit the prober on standardized features.
///
/// Both classes must be present and all features finite. Descends from the
/// zero vector with backtracking line search until the gradient norm drops
/// below `grad_tol` or `max_iters` is reached; the trajectory is exactly
/// reproducible.
pub fn train(features: &[Vec<f64>], labels: &[u8], opts: &TrainOptions) -> Result<ProberModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "features and labels must be non-empty and aligned".into(),
        ));
    }
    let d = features[0].len();
    for x in features {
        if x.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: x.len(),
                context: "training feature".into(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite value in training features".into(),
            ));
        }
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "training needs both classes present".into(),
        ));
    }

    // Per-dimension standardization from the training data; zero-variance
    // dimensions clamp to std 1.
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for x in features {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; d];
    for x in features {
        for (s, (v, m)) in std.iter_mut().zip(x.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|x| {
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i]) / std[i])
                .collect()
        })
        .collect();

    let mut weights = vec![0.0; d];
    let mut bias = 0.0;
    let (mut loss, mut grad_w, mut grad_b) =
        loss_and_grad(&standardized, labels, &weights, bias, opts.l2_strength);
    let mut iterations = 0;
    let mut grad_norm = grad_norm_of(&grad_w, grad_b);

    while grad_norm > opts.grad_tol && iterations < opts.max_iters {
        // Armijo backtracking along the negative gradient.
        let mut step = 1.0;
        let descent = grad_norm * grad_norm;
        let mut accepted = false;
        while step > 1e-20 {
            let trial_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - step * g)
                .collect();
            let trial_b = bias - step * grad_b;
            let (trial_loss, trial_gw, trial_gb) =
                loss_and_grad(&standardized, labels, &trial_w, trial_b, opts.l2_strength);
            if trial_loss <= loss - 1e-4 * step * descent {
                weights = trial_w;
                bias = trial_b;
                loss = trial_loss;
                grad_w = trial_gw;
                grad_b = trial_gb;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // numerically converged
        }
        grad_norm = grad_norm_of(&grad_w, grad_b);
        iterations += 1;
    }

    Ok(ProberModel {
        weights,
        bias,
        feature_mean: mean,
        feature_std: std,
        layer: opts.layer,
        training_meta: TrainingMeta {
            n_pos,
            n_neg,
            l2_strength: opts.l2_strength,
            seed: opts.seed,
            iterations,
            final_grad_norm: grad_norm,
        },
    })
}

fn grad_norm_of(grad_w: &[f64], grad_b: f64) -> f64 {
    (grad_w.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b).sqrt()
}

/// Extract features and labels from a labeled contrast corpus and train.
/// Positives are factual-degraded examples, negatives personalized-
/// beneficial; neutral and unjudged examples are excluded.
pub fn train_from_corpus(
    corpus: &ContrastCorpus,
    backend: &dyn Backend,
    opts: &TrainOptions,
) -> Result<ProberModel> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for example in &corpus.examples {
        let label = match example.label {
            Label::FactualDegraded => 1u8,
            Label::PersonalizedBeneficial => 0u8,
            _ => continue,
        };
        features.push(extract_feature(example, backend, opts.layer)?);
        labels.push(label);
    }
    if features.is_empty() {
        return Err(Error::EmptyGroup(
            "labeled examples for prober training".into(),
        ));
    }
    train(&features, &labels, opts)
}
