//! Mean-pooled embedding readout and the bidirectional in-batch contrastive
//! loss.
//!
//! For a batch of `n` (query, value) pairs the logits are
//! `cos(q_i, v_j) · exp(τ)`; the loss is the mean of the row-wise and
//! column-wise cross-entropies against the diagonal labels. Only in-batch
//! negatives are used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature parameter `τ`; logits are scaled by `exp(τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.025 }
    }
}

impl ContrastiveConfig {
    pub fn logit_scale(&self) -> Result<f64> {
        let s = self.temperature.exp();
        if s.is_finite() {
            Ok(s)
        } else {
            Err(Error::validation("temperature", format!("exp({}) is not finite", self.temperature)))
        }
    }
}

/// Averages last-layer hidden states over the sequence.
pub fn mean_pool<V: AsRef<[f64]>>(states: &[V]) -> Result<Vec<f64>> {
    let first = states
        .first()
        .ok_or_else(|| Error::validation("states", "cannot pool an empty sequence"))?
        .as_ref();
    let m = first.len();
    if m == 0 {
        return Err(Error::validation("states", "hidden vectors must have dimension >= 1"));
    }
    let mut acc = vec![0.0; m];
    for (i, h) in states.iter().enumerate() {
        let h = h.as_ref();
        if h.len() != m {
            return Err(Error::validation(
                "states",
                format!("vector {i} has dimension {} but vector 0 has {m}", h.len()),
            ));
        }
        for (a, x) in acc.iter_mut().zip(h) {
            *a += x;
        }
    }
    let n = states.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Paired query and value embeddings; validated on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    queries: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl EmbeddingBatch {
    pub fn new(queries: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::validation("batch", "must contain at least one pair"));
        }
        if queries.len() != values.len() {
            return Err(Error::validation(
                "batch",
                format!("{} queries but {} values", queries.len(), values.len()),
            ));
        }
        let m = queries[0].len();
        if m == 0 {
            return Err(Error::validation("batch", "embedding dimension must be >= 1"));
        }
        for (side, vs) in [("query", &queries), ("value", &values)] {
            for (i, v) in vs.iter().enumerate() {
                if v.len() != m {
                    return Err(Error::validation(
                        "batch",
                        format!("{side} {i} has dimension {} (expected {m})", v.len()),
                    ));
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::validation("batch", format!("{side} {i} has a non-finite entry")));
                }
                if norm(v) == 0.0 {
                    return Err(Error::validation("batch", format!("{side} {i} has zero norm")));
                }
            }
        }
        Ok(EmbeddingBatch { queries, values })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Vec<f64>] {
        &self.queries
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// The same pairs with the two sides exchanged.
    pub fn swapped(&self) -> Self {
        EmbeddingBatch {
            queries: self.values.clone(),
            values: self.queries.clone(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Symmetric in its arguments bit for bit.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Mean over `n` rows of `-log softmax(row)[label]`, stabilised by max
/// subtraction. `logit(i, j)` is the `j`-th logit of row `i`.
fn cross_entropy(n: usize, logit: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let max = (0..n).map(|j| logit(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).map(|j| (logit(i, j) - max).exp()).sum();
        total += max + sum.ln() - logit(i, i);
    }
    total / n as f64
}

/// Symmetric in-batch contrastive loss.
pub fn contrastive_loss(batch: &EmbeddingBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    let scale = cfg.logit_scale()?;
    let n = batch.len();
    let q_norms: Vec<f64> = batch.queries.iter().map(|v| norm(v)).collect();
    let v_norms: Vec<f64> = batch.values.iter().map(|v| norm(v)).collect();
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let cos = dot(&batch.queries[i], &batch.values[j]) / (q_norms[i] * v_norms[j]);
            logits[i * n + j] = cos * scale;
        }
    }
    let rows = cross_entropy(n, |i, j| logits[i * n + j]);
    let cols = cross_entropy(n, |i, j| logits[j * n + i]);
    Ok((rows + cols) / 2.0)
}
