//! Scalar objectives and their gradients.
//!
//! Every batch loss is an arithmetic mean over the `B` index-aligned pairs
//! `(row i of batch 1, row i of batch 2)`. The `*_masked` variants skip
//! unlabeled rows and are what training uses; the plain variants require
//! complete labels.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("row {row}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { row: usize, label: usize, n_classes: usize },
    #[error("row {row} has no label")]
    MissingLabel { row: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyNorm {
    L1,
    #[default]
    L2,
}

impl PenaltyNorm {
    pub fn from_order(p: u32) -> Option<Self> {
        match p {
            1 => Some(PenaltyNorm::L1),
            2 => Some(PenaltyNorm::L2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub p: PenaltyNorm,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.01, p: PenaltyNorm::L2, alpha: 1.0, beta: 1.0, margin: 2.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda) && ok(self.alpha) && ok(self.beta)) {
            return Err(LossError::InvalidConfig("lambda, alpha and beta must be finite and non-negative"));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(LossError::InvalidConfig("margin must be positive"));
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub reconstruction: f64,
    pub classification: f64,
    pub contrastive: f64,
    pub penalty: f64,
    pub total: f64,
}

impl LossReport {
    pub fn self_supervised(step: u64, reconstruction: f64, penalty: f64) -> Self {
        Self { step, reconstruction, classification: 0.0, contrastive: 0.0, penalty, total: self_loss(reconstruction, penalty) }
    }

    pub fn semi_supervised(step: u64, reconstruction: f64, penalty: f64, classification: f64, contrastive: f64, cfg: &LossConfig) -> Self {
        let total = semi_loss(self_loss(reconstruction, penalty), classification, contrastive, cfg.alpha, cfg.beta);
        Self { step, reconstruction, classification, contrastive, penalty, total }
    }

    /// Bitwise equality of all fields.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && [
                (self.reconstruction, other.reconstruction),
                (self.classification, other.classification),
                (self.contrastive, other.contrastive),
                (self.penalty, other.penalty),
                (self.total, other.total),
            ]
            .iter()
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_same(a: &Matrix, b: &Matrix) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::Shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean over pairs of `MSE(x1, x̂1) + MSE(x2, x̂2)`.
pub fn reconstruction_loss(x1: &Matrix, xhat1: &Matrix, x2: &Matrix, xhat2: &Matrix) -> Result<f64, LossError> {
    reconstruction_loss_grad(x1, xhat1, x2, xhat2).map(|(v, _, _)| v)
}

/// Reconstruction loss with its gradients w.r.t. `x̂1` and `x̂2`.
pub fn reconstruction_loss_grad(
    x1: &Matrix,
    xhat1: &Matrix,
    x2: &Matrix,
    xhat2: &Matrix,
) -> Result<(f64, Matrix, Matrix), LossError> {
    check_same(x1, xhat1)?;
    check_same(x2, xhat2)?;
    check_same(x1, x2)?;
    let (b, m) = x1.shape();
    let scale = 1.0 / (b as f64 * m as f64);
    let mut total = 0.0;
    let mut grads = [Matrix::zeros(b, m), Matrix::zeros(b, m)];
    for (k, (x, xh)) in [(x1, xhat1), (x2, xhat2)].into_iter().enumerate() {
        let g = grads[k].as_mut_slice();
        let mut branch = 0.0;
        for i in 0..b {
            let mut row = 0.0;
            for j in 0..m {
                let r = xh.get(i, j) - x.get(i, j);
                row += r * r;
                g[i * m + j] = 2.0 * r * scale;
            }
            branch += row / m as f64;
        }
        total += branch;
    }
    let [g1, g2] = grads;
    Ok((total / b as f64, g1, g2))
}

/// `λ · ‖W‖_p`.
pub fn regularization_penalty(w: &[f64], lambda: f64, p: PenaltyNorm) -> f64 {
    let norm = match p {
        PenaltyNorm::L1 => w.iter().map(|v| libm::fabs(*v)).sum(),
        PenaltyNorm::L2 => crate::linalg::norm2(w),
    };
    lambda * norm
}

/// Gradient of [`regularization_penalty`]; zero where the norm is not differentiable.
pub fn regularization_penalty_grad(w: &[f64], lambda: f64, p: PenaltyNorm) -> Vec<f64> {
    match p {
        PenaltyNorm::L1 => w
            .iter()
            .map(|&v| if v > 0.0 { lambda } else if v < 0.0 { -lambda } else { 0.0 })
            .collect(),
        PenaltyNorm::L2 => {
            let n = crate::linalg::norm2(w);
            if n == 0.0 {
                vec![0.0; w.len()]
            } else {
                w.iter().map(|v| lambda * v / n).collect()
            }
        }
    }
}

pub fn self_loss(reconstruction: f64, penalty: f64) -> f64 {
    reconstruction + penalty
}

pub fn semi_loss(self_loss: f64, classification: f64, contrastive: f64, alpha: f64, beta: f64) -> f64 {
    self_loss + alpha * classification + beta * contrastive
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| libm::exp(v - mx)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log p_y` with `p = softmax(logits)` clamped at [`PROB_FLOOR`], plus the
/// gradient w.r.t. the logits (zero when the clamp is active).
pub fn cross_entropy_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + libm::log(logits.iter().map(|&v| libm::exp(v - mx)).sum::<f64>());
    let logp = logits[y] - lse;
    let floor = libm::log(PROB_FLOOR);
    if logp < floor {
        return (-floor, vec![0.0; logits.len()]);
    }
    let mut g: Vec<f64> = logits.iter().map(|&v| libm::exp(v - lse)).collect();
    g[y] -= 1.0;
    (-logp, g)
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    cross_entropy_grad(logits, y).0
}

fn check_labels(y: &[Option<usize>], n_classes: usize) -> Result<(), LossError> {
    for (row, l) in y.iter().enumerate() {
        if let Some(label) = *l {
            if label >= n_classes {
                return Err(LossError::LabelOutOfRange { row, label, n_classes });
            }
        }
    }
    Ok(())
}

fn dense(y: &[usize]) -> Vec<Option<usize>> {
    y.iter().copied().map(Some).collect()
}

/// Mean over pairs of `CE(logits1_i, y1_i) + CE(logits2_i, y2_i)`.
pub fn classification_loss(logits1: &Matrix, logits2: &Matrix, y1: &[usize], y2: &[usize]) -> Result<f64, LossError> {
    classification_loss_masked(logits1, logits2, &dense(y1), &dense(y2)).map(|(v, _, _)| v)
}

/// Per-branch mean cross-entropy over labeled rows, summed across the two
/// branches. With complete labels this equals [`classification_loss`].
pub fn classification_loss_masked(
    logits1: &Matrix,
    logits2: &Matrix,
    y1: &[Option<usize>],
    y2: &[Option<usize>],
) -> Result<(f64, Matrix, Matrix), LossError> {
    check_same(logits1, logits2)?;
    let (b, k) = logits1.shape();
    if y1.len() != b || y2.len() != b {
        return Err(LossError::Shape((b, k), (y1.len().max(y2.len()), 1)));
    }
    check_labels(y1, k)?;
    check_labels(y2, k)?;
    let mut total = 0.0;
    let mut grads = [Matrix::zeros(b, k), Matrix::zeros(b, k)];
    for (br, (logits, y)) in [(logits1, y1), (logits2, y2)].into_iter().enumerate() {
        let n = y.iter().flatten().count();
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        let mut sum = 0.0;
        for i in 0..b {
            if let Some(label) = y[i] {
                let (l, g) = cross_entropy_grad(logits.row(i), label);
                sum += l;
                for (dst, gv) in grads[br].row_mut(i).iter_mut().zip(g) {
                    *dst = gv * inv;
                }
            }
        }
        total += sum * inv;
    }
    let [g1, g2] = grads;
    Ok((total, g1, g2))
}

/// Margin contrastive loss over index-aligned pairs of (normalized) embeddings.
pub fn contrastive_loss(z1: &Matrix, z2: &Matrix, y1: &[usize], y2: &[usize], margin: f64) -> Result<f64, LossError> {
    if y1.len() != z1.rows() || y2.len() != z2.rows() {
        return Err(LossError::Shape(z1.shape(), (y1.len(), 1)));
    }
    contrastive_loss_masked(z1, z2, &dense(y1), &dense(y2), margin).map(|(v, _, _)| v)
}

/// Contrastive loss averaged over pairs where both rows are labeled, with
/// gradients w.r.t. `z1` and `z2`.
pub fn contrastive_loss_masked(
    z1: &Matrix,
    z2: &Matrix,
    y1: &[Option<usize>],
    y2: &[Option<usize>],
    margin: f64,
) -> Result<(f64, Matrix, Matrix), LossError> {
    check_same(z1, z2)?;
    let (b, k) = z1.shape();
    if y1.len() != b || y2.len() != b {
        return Err(LossError::Shape((b, k), (y1.len().max(y2.len()), 1)));
    }
    let pairs: Vec<(usize, bool)> = (0..b)
        .filter_map(|i| match (y1[i], y2[i]) {
            (Some(a), Some(c)) => Some((i, a == c)),
            _ => None,
        })
        .collect();
    let mut g1 = Matrix::zeros(b, k);
    let mut g2 = Matrix::zeros(b, k);
    if pairs.is_empty() {
        return Ok((0.0, g1, g2));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for &(i, similar) in &pairs {
        let diff: Vec<f64> = z1.row(i).iter().zip(z2.row(i)).map(|(a, c)| a - c).collect();
        let d = crate::linalg::norm2(&diff);
        // coef multiplies (z1 − z2) in ∂c/∂z1.
        let (c, coef) = if similar {
            (0.5 * d * d, 1.0)
        } else {
            let gap = (margin - d).max(0.0);
            let coef = if gap > 0.0 && d > 0.0 { -gap / d } else { 0.0 };
            (0.5 * gap * gap, coef)
        };
        total += c;
        for ((a, c2), df) in g1.row_mut(i).iter_mut().zip(g2.row_mut(i).iter_mut()).zip(&diff) {
            *a = coef * df * inv;
            *c2 = -coef * df * inv;
        }
    }
    Ok((total * inv, g1, g2))
}
