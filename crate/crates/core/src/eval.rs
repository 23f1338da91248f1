//! Cell-level evaluation: endpoint-distance confidence, per-cell matching,
//! accuracy/recall and frequency-weighted IoU across confidence thresholds.

use crate::data::{CellClass, CellSegment, DetectedSegment, LabelGrid, LineClass, Point};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("no ground-truth foreground cells; metric undefined")]
    NoGroundTruth,
    #[error("{predictions} prediction sets for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("invalid confidence configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceConfig {
    /// Distance at which confidence reaches zero, in cell units.
    pub d_th: f64,
    /// Sharpness of the exponential falloff.
    pub alpha: f64,
    /// Also pair each predicted endpoint with its nearest ground-truth
    /// endpoint and average both directions.
    pub symmetric: bool,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        ConfidenceConfig {
            d_th: 1.0,
            alpha: 2.0,
            symmetric: false,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.d_th > 0.0) || !(self.alpha > 0.0) {
            return Err(EvalError::Config(format!(
                "d_th {} and alpha {} must be positive",
                self.d_th, self.alpha
            )));
        }
        Ok(())
    }
}

/// `(e^{a(1 - d/d_th)} - 1) / (e^a - 1)` for `d <= d_th`, else 0.
pub fn endpoint_confidence(distance: f64, cfg: &ConfidenceConfig) -> f64 {
    if distance > cfg.d_th {
        return 0.0;
    }
    let a = cfg.alpha;
    (a * (1.0 - distance / cfg.d_th)).exp_m1() / a.exp_m1()
}

fn nearest_mean(from: [Point; 2], to: [Point; 2], cfg: &ConfidenceConfig) -> f64 {
    from.iter()
        .map(|p| {
            let d = p.dist(to[0]).min(p.dist(to[1]));
            endpoint_confidence(d, cfg)
        })
        .sum::<f64>()
        / 2.0
}

/// Mean endpoint confidence of `pred` against `gt`, both in the same cell's
/// normalized frame. Segment direction does not matter.
pub fn segment_confidence(pred: &CellSegment, gt: &CellSegment, cfg: &ConfidenceConfig) -> f64 {
    let (p, g) = ([pred.p1, pred.p2], [gt.p1, gt.p2]);
    let forward = nearest_mean(g, p, cfg);
    if cfg.symmetric {
        (forward + nearest_mean(p, g, cfg)) / 2.0
    } else {
        forward
    }
}

/// Outcome of one cell before a confidence threshold is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMatch {
    pub gt: CellClass,
    pub pred: CellClass,
    /// Lowest segment confidence over the cell's class pairs, present when
    /// the predicted class equals a foreground ground-truth class.
    pub confidence: Option<f64>,
}

/// Classifies every cell of one image.
pub fn match_cells_detail(
    predictions: &[DetectedSegment],
    label: &LabelGrid,
    cfg: &ConfidenceConfig,
) -> Result<Vec<CellMatch>, EvalError> {
    let grid = &label.grid;
    let n = grid.grid_n;
    let mut pred: Vec<[Option<&DetectedSegment>; 2]> = vec![[None, None]; grid.cells()];
    for seg in predictions {
        if seg.row >= n || seg.col >= n {
            return Err(EvalError::GridMismatch(format!(
                "predicted cell ({}, {}) outside a {n}x{n} grid",
                seg.row, seg.col
            )));
        }
        let slot = &mut pred[seg.row * n + seg.col][seg.cls.index()];
        if slot.is_none_or(|cur| seg.score > cur.score) {
            *slot = Some(seg);
        }
    }
    let mut out = Vec::with_capacity(grid.cells());
    for row in 0..n {
        for col in 0..n {
            let slots = &pred[row * n + col];
            let gt = label.cell_class(row, col);
            let pc = CellClass::from_flags(slots[0].is_some(), slots[1].is_some());
            let confidence = (gt == pc && gt != CellClass::Background).then(|| {
                LineClass::ALL
                    .into_iter()
                    .filter(|&c| gt.contains(c))
                    .map(|c| {
                        let p = slots[c.index()].expect("class present").to_cell_segment(grid);
                        let [x1, y1, x2, y2] = label.slot(row, col, c).map(f64::from);
                        let g = CellSegment {
                            row,
                            col,
                            cls: c,
                            p1: Point::new(x1, y1),
                            p2: Point::new(x2, y2),
                        };
                        segment_confidence(&p, &g, cfg)
                    })
                    .fold(f64::INFINITY, f64::min)
            });
            out.push(CellMatch { gt, pred: pc, confidence });
        }
    }
    Ok(out)
}

/// Per-class TP/FP/FN plus the full 4x4 class confusion table.
///
/// Class order is convex-only, concave-only, both (and background as the
/// last confusion row/column).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellOutcomeCounts {
    pub tp: [u64; 3],
    pub fp: [u64; 3],
    #[serde(rename = "fn")]
    pub fn_: [u64; 3],
    /// `confusion[gt][pred]` cell counts, background included.
    pub confusion: [[u64; 4]; 4],
}

fn class_slot(c: CellClass) -> usize {
    c.foreground_index().unwrap_or(3)
}

impl CellOutcomeCounts {
    pub fn gt_count(&self, class: usize) -> u64 {
        self.tp[class] + self.fn_[class]
    }

    pub fn merge(&mut self, other: &CellOutcomeCounts) {
        for i in 0..3 {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Tallies matched cells at confidence threshold `c`.
    pub fn from_matches(matches: &[CellMatch], c: f64) -> Self {
        let mut counts = CellOutcomeCounts::default();
        for m in matches {
            counts.confusion[class_slot(m.gt)][class_slot(m.pred)] += 1;
            let pred_fg = m.pred.foreground_index();
            match m.gt.foreground_index() {
                None => {
                    if let Some(p) = pred_fg {
                        counts.fp[p] += 1;
                    }
                }
                Some(g) if pred_fg == Some(g) => {
                    if m.confidence.is_some_and(|conf| conf >= c) {
                        counts.tp[g] += 1;
                    } else {
                        counts.fn_[g] += 1;
                        counts.fp[g] += 1;
                    }
                }
                Some(g) => {
                    counts.fn_[g] += 1;
                    if let Some(p) = pred_fg {
                        counts.fp[p] += 1;
                    }
                }
            }
        }
        counts
    }
}

/// Counts for one image at one threshold.
pub fn match_cells(
    predictions: &[DetectedSegment],
    label: &LabelGrid,
    c_threshold: f64,
    cfg: &ConfidenceConfig,
) -> Result<CellOutcomeCounts, EvalError> {
    Ok(CellOutcomeCounts::from_matches(
        &match_cells_detail(predictions, label, cfg)?,
        c_threshold,
    ))
}

/// Ground-truth-frequency-weighted mean of per-class IoU.
pub fn fwiou(counts: &CellOutcomeCounts) -> Result<f64, EvalError> {
    let total: u64 = (0..3).map(|i| counts.gt_count(i)).sum();
    if total == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok((0..3)
        .map(|i| {
            let denom = counts.tp[i] + counts.fp[i] + counts.fn_[i];
            if denom == 0 {
                return 0.0;
            }
            let w = counts.gt_count(i) as f64 / total as f64;
            w * counts.tp[i] as f64 / denom as f64
        })
        .sum())
}

/// Micro-averaged `(accuracy, recall)`; accuracy is TP / (TP + FP).
pub fn precision_recall(counts: &CellOutcomeCounts) -> (f64, f64) {
    let tp: u64 = counts.tp.iter().sum();
    let fp: u64 = counts.fp.iter().sum();
    let fn_: u64 = counts.fn_.iter().sum();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

pub const THRESHOLD_STEPS: usize = 19;
pub const OPERATING_THRESHOLD: f64 = 0.5;

/// `0.05, 0.10, ..., 0.95`.
pub fn confidence_thresholds() -> Vec<f64> {
    (1..=THRESHOLD_STEPS).map(|k| k as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub fwiou: f64,
    pub counts: CellOutcomeCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub gt_cells: u64,
    pub rows: Vec<ThresholdRow>,
    pub mfwiou: f64,
    /// Copy of the row at the operating threshold.
    pub operating: ThresholdRow,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text_table(&self) -> String {
        let mut s = String::new();
        let op = &self.operating;
        let _ = writeln!(s, "{:>10} {:>10} {:>10} {:>10}", "Accuracy", "Recall", "FWIOU", "mFWIOU");
        let _ = writeln!(
            s,
            "{:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            op.accuracy, op.recall, op.fwiou, self.mfwiou
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>10} {:>10} {:>10} {:>10}", "c", "Accuracy", "Recall", "FWIOU");
        for row in &self.rows {
            let mark = if row.threshold == op.threshold { " *" } else { "" };
            let _ = writeln!(
                s,
                "{:>10.2} {:>10.4} {:>10.4} {:>10.4}{mark}",
                row.threshold, row.accuracy, row.recall, row.fwiou
            );
        }
        s
    }
}

/// Evaluates a dataset at every threshold, aggregating counts over images.
pub fn mfwiou(
    predictions: &[Vec<DetectedSegment>],
    labels: &[LabelGrid],
    cfg: &ConfidenceConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let matches = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| match_cells_detail(p, l, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(THRESHOLD_STEPS);
    for c in confidence_thresholds() {
        let mut counts = CellOutcomeCounts::default();
        for m in &matches {
            counts.merge(&CellOutcomeCounts::from_matches(m, c));
        }
        let fw = fwiou(&counts)?;
        let (accuracy, recall) = precision_recall(&counts);
        rows.push(ThresholdRow {
            threshold: c,
            accuracy,
            recall,
            fwiou: fw,
            counts,
        });
    }
    let mfwiou = rows.iter().map(|r| r.fwiou).sum::<f64>() / rows.len() as f64;
    let operating = rows
        .iter()
        .find(|r| (r.threshold - OPERATING_THRESHOLD).abs() < 1e-12)
        .expect("operating threshold on the grid")
        .clone();
    let gt_cells = (0..3).map(|i| operating.counts.gt_count(i)).sum();
    Ok(EvalReport {
        images: labels.len(),
        gt_cells,
        rows,
        mfwiou,
        operating,
    })
}
