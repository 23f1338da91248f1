//! Masked multitask loss: per-channel binary cross-entropy on the two
//! classifiers plus a y-weighted squared location error, averaged over the
//! `N x N` cells.
//!
//! All maps are channel-major (`[channel][row][col]`) and computed in `f64`.
//! Slot 1 (location channels 0..4) is scored only in cells that contain a
//! convex line, slot 2 (channels 4..8) only in cells with a concave line.

use crate::data::LabelGrid;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("classification target {value} at index {index} is not 0 or 1")]
    NonBinaryTarget { index: usize, value: f32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

/// Which indicator masks the location term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// Ground-truth class indicators.
    #[default]
    Truth,
    /// Predicted class probabilities; gradients flow into the classifier.
    Pred,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the location term.
    pub lambda_loc: f64,
    /// Weight of y-coordinate errors relative to x-coordinate errors.
    pub alpha_y: f64,
    /// Clamp applied to probabilities fed directly into the log terms.
    pub eps: f64,
    pub mask_source: MaskSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_loc: 4.0,
            alpha_y: 4.0,
            eps: 1e-7,
            mask_source: MaskSource::Truth,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_loc > 0.0) || !(self.alpha_y > 0.0) {
            return Err(LossError::Config(format!(
                "weights must be positive (lambda {}, alpha {})",
                self.lambda_loc, self.alpha_y
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(LossError::Config(format!("eps {} outside (0, 0.5)", self.eps)));
        }
        Ok(())
    }
}

/// Loss value split into its two weighted terms; `total = cls + loc`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.loc.is_finite()
    }
}

/// Gradients of the total loss with respect to logits and location outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub d_logits: Vec<f64>,
    pub d_loc: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[t ln s(z) + (1 - t) ln(1 - s(z))]` without overflow.
fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn check_targets(cls_target: &[f32]) -> Result<(), LossError> {
    match cls_target
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0.0 && v != 1.0)
    {
        Some((index, &value)) => Err(LossError::NonBinaryTarget { index, value }),
        None => Ok(()),
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<(), LossError> {
    if got != expected {
        return Err(LossError::Shape(format!("{what}: expected {expected} values, got {got}")));
    }
    Ok(())
}

/// Per-cell classification loss: BCE summed over both channels.
pub fn classification_loss(
    logits: &[f64],
    cls_target: &[f32],
    grid_n: usize,
) -> Result<Vec<f64>, LossError> {
    let cells = grid_n * grid_n;
    check_len("logits", logits.len(), 2 * cells)?;
    check_len("classification target", cls_target.len(), 2 * cells)?;
    check_targets(cls_target)?;
    Ok((0..cells)
        .map(|i| {
            (0..2)
                .map(|k| bce_with_logit(logits[k * cells + i], cls_target[k * cells + i] as f64))
                .sum()
        })
        .collect())
}

/// Same as [`classification_loss`] for probabilities, clamped to `[eps, 1 - eps]`.
pub fn classification_loss_from_probs(
    probs: &[f64],
    cls_target: &[f32],
    grid_n: usize,
    eps: f64,
) -> Result<Vec<f64>, LossError> {
    let cells = grid_n * grid_n;
    check_len("probabilities", probs.len(), 2 * cells)?;
    check_len("classification target", cls_target.len(), 2 * cells)?;
    check_targets(cls_target)?;
    Ok((0..cells)
        .map(|i| {
            (0..2)
                .map(|k| {
                    let p = probs[k * cells + i].clamp(eps, 1.0 - eps);
                    let t = cls_target[k * cells + i] as f64;
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum()
        })
        .collect())
}

/// Unmasked per-slot location errors: `[slot][cell]`.
fn slot_errors(loc_pred: &[f64], loc_target: &[f32], cells: usize, alpha_y: f64) -> [Vec<f64>; 2] {
    std::array::from_fn(|slot| {
        (0..cells)
            .map(|i| {
                (0..4)
                    .map(|j| {
                        let ch = slot * 4 + j;
                        let d = loc_pred[ch * cells + i] - loc_target[ch * cells + i] as f64;
                        let w = if j % 2 == 1 { alpha_y } else { 1.0 };
                        w * d * d
                    })
                    .sum()
            })
            .collect()
    })
}

/// Per-cell location loss masked by the ground-truth class indicators.
pub fn location_loss(
    loc_pred: &[f64],
    loc_target: &[f32],
    cls_target: &[f32],
    alpha_y: f64,
    grid_n: usize,
) -> Result<Vec<f64>, LossError> {
    let cells = grid_n * grid_n;
    check_len("location prediction", loc_pred.len(), 8 * cells)?;
    check_len("location target", loc_target.len(), 8 * cells)?;
    check_len("classification target", cls_target.len(), 2 * cells)?;
    let [l1, l2] = slot_errors(loc_pred, loc_target, cells, alpha_y);
    Ok((0..cells)
        .map(|i| cls_target[i] as f64 * l1[i] + cls_target[cells + i] as f64 * l2[i])
        .collect())
}

/// Total loss of one image, optionally with gradients.
fn multitask(
    logits: &[f64],
    loc: &[f64],
    label: &LabelGrid,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<LossGrad>), LossError> {
    cfg.validate()?;
    let n = label.grid.grid_n;
    let cells = n * n;
    let cls_map = classification_loss(logits, &label.cls_target, n)?;
    check_len("location prediction", loc.len(), 8 * cells)?;
    check_len("location target", label.loc_target.len(), 8 * cells)?;
    let slot_err = slot_errors(loc, &label.loc_target, cells, cfg.alpha_y);
    let mask = |k: usize, i: usize| match cfg.mask_source {
        MaskSource::Truth => label.cls_target[k * cells + i] as f64,
        MaskSource::Pred => sigmoid(logits[k * cells + i]),
    };
    let norm = 1.0 / cells as f64;
    let cls_sum: f64 = cls_map.iter().sum();
    let loc_sum: f64 = (0..cells)
        .map(|i| mask(0, i) * slot_err[0][i] + mask(1, i) * slot_err[1][i])
        .sum();
    let breakdown = LossBreakdown {
        total: norm * (cls_sum + cfg.lambda_loc * loc_sum),
        cls: norm * cls_sum,
        loc: norm * cfg.lambda_loc * loc_sum,
    };
    if !with_grad {
        return Ok((breakdown, None));
    }
    let mut d_logits = vec![0.0; 2 * cells];
    let mut d_loc = vec![0.0; 8 * cells];
    for k in 0..2 {
        for i in 0..cells {
            let idx = k * cells + i;
            let s = sigmoid(logits[idx]);
            let mut g = s - label.cls_target[idx] as f64;
            if cfg.mask_source == MaskSource::Pred {
                g += cfg.lambda_loc * slot_err[k][i] * s * (1.0 - s);
            }
            d_logits[idx] = norm * g;
        }
    }
    for slot in 0..2 {
        for i in 0..cells {
            let m = mask(slot, i);
            if m == 0.0 {
                continue;
            }
            for j in 0..4 {
                let idx = (slot * 4 + j) * cells + i;
                let w = if j % 2 == 1 { cfg.alpha_y } else { 1.0 };
                let d = loc[idx] - label.loc_target[idx] as f64;
                d_loc[idx] = norm * cfg.lambda_loc * m * w * 2.0 * d;
            }
        }
    }
    Ok((breakdown, Some(LossGrad { d_logits, d_loc })))
}

/// `(1/N^2) * [sum of classification losses + lambda * sum of masked location losses]`.
pub fn total_loss(
    logits: &[f64],
    loc: &[f64],
    label: &LabelGrid,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    multitask(logits, loc, label, cfg, false).map(|(b, _)| b)
}

pub fn total_loss_with_grad(
    logits: &[f64],
    loc: &[f64],
    label: &LabelGrid,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrad), LossError> {
    multitask(logits, loc, label, cfg, true).map(|(b, g)| (b, g.expect("gradient requested")))
}
