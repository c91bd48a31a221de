//! Training objectives: frame-wise cross-entropy, truncated smoothing of
//! log-probabilities, the per-stage segmentation loss, score MSE, and the
//! joint total.

use serde::{Deserialize, Serialize};

use crate::datamodel::FrameLabelSequence;
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, log_softmax_rows_backward, softmax_rows, Matrix};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Truncation threshold on per-cell log-probability jumps.
    pub tau: f64,
    /// Weight of the smoothing term inside the segmentation loss.
    pub smoothing_weight: f64,
    /// Per-stage multipliers; empty means 1 for every stage.
    pub stage_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            smoothing_weight: 0.15,
            stage_weights: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(self.smoothing_weight.is_finite() && self.smoothing_weight >= 0.0) {
            return Err(Error::Config("smoothing_weight must be >= 0".into()));
        }
        if self.stage_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("stage weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn stage_weight(&self, stage: usize) -> f64 {
        self.stage_weights.get(stage).copied().unwrap_or(1.0)
    }
}

/// Which frames the smoothing gradient reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingGradient {
    /// Differentiate through both frames of every transition.
    Full,
    /// Treat frame `t-1` as a constant; used for training.
    DetachPrevious,
}

fn check_labels(rows: usize, cols: usize, labels: &FrameLabelSequence) -> Result<()> {
    if rows != labels.len() {
        return Err(Error::shape("frame labels", rows, labels.len()));
    }
    if cols != crate::datamodel::NUM_CLASSES {
        return Err(Error::shape("class count", crate::datamodel::NUM_CLASSES, cols));
    }
    Ok(())
}

/// Mean over frames of `-log y[t, c(t)]`, with `y` floored at [`PROB_FLOOR`].
pub fn cross_entropy_frames(probs: &Matrix, labels: &FrameLabelSequence) -> Result<f64> {
    check_labels(probs.rows(), probs.cols(), labels)?;
    let t = probs.rows() as f64;
    let sum: f64 = labels
        .decode()
        .iter()
        .enumerate()
        .map(|(r, c)| -probs.get(r, c.index()).max(PROB_FLOOR).ln())
        .sum();
    Ok(sum / t)
}

/// Cross-entropy computed from logits, with its gradient.
pub fn cross_entropy_logits(logits: &Matrix, labels: &FrameLabelSequence) -> Result<(f64, Matrix)> {
    check_labels(logits.rows(), logits.cols(), labels)?;
    let t = logits.rows() as f64;
    let log_p = log_softmax_rows(logits);
    let probs = softmax_rows(logits);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut sum = 0.0;
    for (r, c) in labels.decode().iter().enumerate() {
        let lp = log_p.get(r, c.index());
        if lp > log_floor() {
            sum -= lp;
            let g = grad.row_mut(r);
            for (gc, &p) in g.iter_mut().zip(probs.row(r)) {
                *gc = p / t;
            }
            g[c.index()] -= 1.0 / t;
        } else {
            sum -= log_floor();
        }
    }
    Ok((sum / t, grad))
}

/// `(1/(T C)) * sum_{t>=1, c} min(|lp[t,c] - lp[t-1,c]|, tau)^2`.
///
/// The normalizer counts all `T` frames although only `T - 1` transitions
/// exist. Fewer than two frames gives 0.
pub fn truncated_smoothing_loss(log_probs: &Matrix, tau: f64) -> f64 {
    let (t, c) = log_probs.shape();
    if t < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for r in 1..t {
        for (a, b) in log_probs.row(r).iter().zip(log_probs.row(r - 1)) {
            let delta = (a - b).abs().min(tau);
            sum += delta * delta;
        }
    }
    sum / (t * c) as f64
}

/// Gradient of [`truncated_smoothing_loss`] with respect to `log_probs`.
/// Clamped cells contribute nothing.
pub fn truncated_smoothing_grad(log_probs: &Matrix, tau: f64, flow: SmoothingGradient) -> Matrix {
    let (t, c) = log_probs.shape();
    let mut grad = Matrix::zeros(t, c);
    if t < 2 {
        return grad;
    }
    let norm = (t * c) as f64;
    for r in 1..t {
        for k in 0..c {
            let diff = log_probs.get(r, k) - log_probs.get(r - 1, k);
            if diff.abs() < tau {
                let g = 2.0 * diff / norm;
                grad.as_mut_slice()[r * c + k] += g;
                if flow == SmoothingGradient::Full {
                    grad.as_mut_slice()[(r - 1) * c + k] -= g;
                }
            }
        }
    }
    grad
}

/// Log-probabilities floored at `ln(PROB_FLOOR)`.
fn floored_log_probs(logits: &Matrix) -> (Matrix, Matrix) {
    let lp = log_softmax_rows(logits);
    let floor = log_floor();
    (lp.map(|v| v.max(floor)), lp)
}

/// Smoothing loss on logits with its gradient back to the logits.
pub fn smoothing_logits(logits: &Matrix, tau: f64, flow: SmoothingGradient) -> (f64, Matrix) {
    let (lp, raw) = floored_log_probs(logits);
    let value = truncated_smoothing_loss(&lp, tau);
    let mut g = truncated_smoothing_grad(&lp, tau, flow);
    let floor = log_floor();
    for (gv, &r) in g.as_mut_slice().iter_mut().zip(raw.as_slice()) {
        if r <= floor {
            *gv = 0.0;
        }
    }
    (value, log_softmax_rows_backward(&softmax_rows(logits), &g))
}

#[derive(Debug, Clone)]
pub struct SegmentationLoss {
    pub value: f64,
    pub per_stage: Vec<f64>,
    /// `dL/dlogits` for each stage.
    pub grads: Vec<Matrix>,
}

/// `sum_s w_s * (CE_s + lambda_T * smooth_s)`.
pub fn segmentation_loss(per_stage_logits: &[Matrix], labels: &FrameLabelSequence, config: &LossConfig) -> Result<SegmentationLoss> {
    segmentation_loss_with(per_stage_logits, labels, config, SmoothingGradient::DetachPrevious)
}

pub fn segmentation_loss_with(
    per_stage_logits: &[Matrix],
    labels: &FrameLabelSequence,
    config: &LossConfig,
    flow: SmoothingGradient,
) -> Result<SegmentationLoss> {
    if per_stage_logits.is_empty() {
        return Err(Error::shape("segmentation loss", ">= 1 stage", 0));
    }
    let mut value = 0.0;
    let mut per_stage = Vec::with_capacity(per_stage_logits.len());
    let mut grads = Vec::with_capacity(per_stage_logits.len());
    for (s, logits) in per_stage_logits.iter().enumerate() {
        let w = config.stage_weight(s);
        let (ce, mut g) = cross_entropy_logits(logits, labels)?;
        let (sm, gs) = smoothing_logits(logits, config.tau, flow);
        let stage_value = ce + config.smoothing_weight * sm;
        for (a, b) in g.as_mut_slice().iter_mut().zip(gs.as_slice()) {
            *a = w * (*a + config.smoothing_weight * b);
        }
        value += w * stage_value;
        per_stage.push(stage_value);
        grads.push(g);
    }
    Ok(SegmentationLoss {
        value,
        per_stage,
        grads,
    })
}

/// `(1/n) * sum (pred - gt)^2`.
pub fn assessment_mse(predicted: &[f64], gt: &[f64]) -> Result<f64> {
    if predicted.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: gt.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let n = predicted.len() as f64;
    Ok(predicted.iter().zip(gt).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n)
}

/// Gradient of [`assessment_mse`] with respect to `predicted`.
pub fn assessment_mse_grad(predicted: &[f64], gt: &[f64]) -> Vec<f64> {
    let n = predicted.len() as f64;
    predicted.iter().zip(gt).map(|(p, y)| 2.0 * (p - y) / n).collect()
}

/// Joint objective: unweighted sum.
pub fn total_loss(seg_loss: f64, mse_loss: f64) -> f64 {
    seg_loss + mse_loss
}
