//! InfoNCE loss with analytic gradients, plus the two FIFO negative queues:
//! the memory bank of past keys and the extra sample queue of old-data keys.
//!
//! Per query row the loss is
//! `-log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_k exp(q.k/tau)) )`,
//! reported as the mean over rows. Gradients flow to the query embeddings
//! only; keys and queue entries come from momentum encoders and are never
//! trained.

use std::collections::VecDeque;

use crate::encoder::FeatureBatch;
use crate::error::{CclError, Result};
use crate::numerics::{dot, norm, Matrix};

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, entries: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }
}

/// Loss value, per-row losses, and the gradient w.r.t. the query embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveResult {
    pub loss: f64,
    pub per_row: Vec<f64>,
    pub grad_q: Matrix,
}

/// InfoNCE of queries against their positive keys and a queue of negatives.
///
/// Returns the mean per-row loss and its exact gradient w.r.t. `q` rows.
/// With an empty queue the loss is exactly zero (numerator equals
/// denominator), which makes the first training step and the first task's
/// extra-sample-queue term degenerate by construction.
pub fn info_nce(
    q: &FeatureBatch,
    k_plus: &FeatureBatch,
    negatives: &NegativeQueue,
    tau: f64,
) -> Result<ContrastiveResult> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(CclError::InvalidTemperature);
    }
    if q.len() != k_plus.len() || q.dim() != k_plus.dim() {
        return Err(CclError::DimensionMismatch {
            expected: format!("{}x{} keys", q.len(), q.dim()),
            got: format!("{}x{}", k_plus.len(), k_plus.dim()),
        });
    }
    if !negatives.is_empty() && negatives.dim() != q.dim() {
        return Err(CclError::DimensionMismatch {
            expected: format!("queue dim {}", q.dim()),
            got: format!("{}", negatives.dim()),
        });
    }

    let b = q.len();
    let d = q.dim();
    let n_neg = negatives.len();
    let mut per_row = Vec::with_capacity(b);
    let mut grad_q = Matrix::zeros(b, d);

    for i in 0..b {
        let qi = q.embeddings.row(i);
        // Logit 0 is the positive pair; the rest are queue entries in order.
        let mut logits = Vec::with_capacity(1 + n_neg);
        logits.push(dot(qi, k_plus.embeddings.row(i)) / tau);
        for neg in negatives.iter() {
            logits.push(dot(qi, neg) / tau);
        }

        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        per_row.push(z.ln() + max - logits[0]);

        // d loss_i / d q_i = (1/tau) (sum_j p_j k_j - k+), then / B for the mean.
        let row = grad_q.row_mut(i);
        let p0 = exps[0] / z;
        for (g, &kv) in row.iter_mut().zip(k_plus.embeddings.row(i)) {
            *g = (p0 - 1.0) * kv;
        }
        for (j, neg) in negatives.iter().enumerate() {
            let pj = exps[j + 1] / z;
            for (g, &nv) in row.iter_mut().zip(neg) {
                *g += pj * nv;
            }
        }
        for g in row.iter_mut() {
            *g /= tau * b as f64;
        }
    }

    let loss = per_row.iter().sum::<f64>() / b as f64;
    Ok(ContrastiveResult { loss, per_row, grad_q })
}

/// Appends keys in batch order, evicting oldest entries past capacity.
pub fn queue_push(queue: &mut NegativeQueue, keys: &FeatureBatch) -> Result<()> {
    if !keys.is_empty() && keys.dim() != queue.dim {
        return Err(CclError::DimensionMismatch {
            expected: format!("queue dim {}", queue.dim),
            got: format!("{}", keys.dim()),
        });
    }
    for i in 0..keys.len() {
        let row = keys.embeddings.row(i);
        let n = norm(row);
        if (n - 1.0).abs() > 1e-6 {
            return Err(CclError::UnnormalizedKey { row: i, norm: n });
        }
    }
    for i in 0..keys.len() {
        if queue.entries.len() == queue.capacity {
            queue.entries.pop_front();
        }
        if queue.capacity > 0 {
            queue.entries.push_back(keys.embeddings.row(i).to_vec());
        }
    }
    Ok(())
}

/// Contrastive loss of the batch against the extra sample queue.
///
/// Contract-identical to [`info_nce`] with the extra sample queue as the
/// negatives; applied to the full batch (old and new rows alike).
pub fn esq_loss(
    z_q: &FeatureBatch,
    z_k: &FeatureBatch,
    esq: &NegativeQueue,
    tau: f64,
) -> Result<ContrastiveResult> {
    info_nce(z_q, z_k, esq, tau)
}
