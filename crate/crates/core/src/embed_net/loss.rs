//! Triplet loss with batch-hard mining, plus the cross-entropy pieces of
//! the closed-set baseline.
//!
//! The triplet loss compares squared Euclidean distances:
//!
//! ```text
//! loss = max(|a - p|^2 - |a - n|^2 + margin, 0)
//! ```
//!
//! Mining happens after a mini-batch has gone through the network: each
//! example with at least one same-label partner anchors one candidate
//! triplet, built from its farthest positive and nearest negative, and
//! candidates whose loss is zero are discarded.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Indices of one anchor/positive/negative triple within a mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// The triplet hinge on embedding vectors.
pub fn triplet_loss(
    a: &ArrayView1<f64>,
    p: &ArrayView1<f64>,
    n: &ArrayView1<f64>,
    margin: f64,
) -> f64 {
    (dist_sq(a, p) - dist_sq(a, n) + margin).max(0.0)
}

fn dist_sq(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// What mining found in one batch, including the diagnostics that explain
/// an empty result.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Examples that had at least one positive and therefore anchored a
    /// candidate triplet.
    pub anchors_considered: usize,
    /// Candidates dropped because their hinge was already zero.
    pub discarded_zero_loss: usize,
    /// True when every example shares one label, so no negatives exist.
    pub single_label_batch: bool,
}

/// Batch-hard mining over infer- or train-mode embeddings.
///
/// For each anchor: positive = same-label example at maximum squared
/// distance, negative = different-label example at minimum squared
/// distance; ties resolve to the smallest index. A single-label batch is
/// a diagnostic, not an error.
pub fn mine_triplets(embeddings: &Array2<f64>, labels: &[u32], margin: f64) -> MiningOutcome {
    let b = embeddings.nrows();
    debug_assert_eq!(b, labels.len());
    let single_label_batch = labels.windows(2).all(|w| w[0] == w[1]);
    let mut outcome = MiningOutcome {
        triplets: Vec::new(),
        anchors_considered: 0,
        discarded_zero_loss: 0,
        single_label_batch,
    };
    if single_label_batch {
        return outcome;
    }
    for a in 0..b {
        let mut hardest_p: Option<(usize, f64)> = None;
        let mut hardest_n: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist_sq(&embeddings.row(a), &embeddings.row(j));
            if labels[j] == labels[a] {
                if hardest_p.is_none_or(|(_, best)| d > best) {
                    hardest_p = Some((j, d));
                }
            } else if hardest_n.is_none_or(|(_, best)| d < best) {
                hardest_n = Some((j, d));
            }
        }
        let (Some((p, d_ap)), Some((n, d_an))) = (hardest_p, hardest_n) else {
            continue;
        };
        outcome.anchors_considered += 1;
        if d_ap - d_an + margin > 0.0 {
            outcome.triplets.push(Triplet { anchor: a, positive: p, negative: n });
        } else {
            outcome.discarded_zero_loss += 1;
        }
    }
    outcome
}

/// Mean triplet loss of a batch under batch-hard mining, with zero-loss
/// anchors still counted in the denominator. Used as the epoch validation
/// metric: it stays comparable across epochs because the denominator is
/// the anchor count, not the survivor count.
pub fn batch_hinge_mean(embeddings: &Array2<f64>, labels: &[u32], margin: f64) -> Option<f64> {
    let b = embeddings.nrows();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for a in 0..b {
        let mut max_p: Option<f64> = None;
        let mut min_n: Option<f64> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist_sq(&embeddings.row(a), &embeddings.row(j));
            if labels[j] == labels[a] {
                max_p = Some(max_p.map_or(d, |m: f64| m.max(d)));
            } else {
                min_n = Some(min_n.map_or(d, |m: f64| m.min(d)));
            }
        }
        if let (Some(dp), Some(dn)) = (max_p, min_n) {
            total += (dp - dn + margin).max(0.0);
            anchors += 1;
        }
    }
    (anchors > 0).then(|| total / anchors as f64)
}

// ---------------------------------------------------------------------------
// Cross entropy (baseline head)
// ---------------------------------------------------------------------------

/// Softmax cross entropy of one logit vector against a class label.
pub fn cross_entropy_loss(logits: &ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(log_sum - logits[label])
}

/// Gradient of mean cross entropy over a batch: `softmax(logits) - onehot`,
/// scaled by 1/batch. Labels are class indices.
pub(crate) fn cross_entropy_backward(logits: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let b = logits.nrows();
    let mut d = Array2::zeros(logits.raw_dim());
    for (bi, row) in logits.outer_iter().enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Array1<f64> = row.mapv(|v| (v - max).exp());
        let sum: f64 = exps.sum();
        for (ci, e) in exps.iter().enumerate() {
            d[[bi, ci]] = (e / sum - f64::from(u8::from(ci == labels[bi]))) / b as f64;
        }
    }
    d
}

/// Open-set score of the baseline: the maximum logit. Higher means the
/// frame looks more like a known device.
pub fn max_logit_score(logits: &ArrayView1<f64>) -> f64 {
    logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
