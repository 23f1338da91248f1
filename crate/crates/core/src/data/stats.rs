//! Line aspect-ratio histogram over a dataset.

use super::annotation::LineAnnotation;
use super::DataError;
use serde::{Deserialize, Serialize};

/// Histogram of `|dy| / |dx|` per line.
///
/// Regular bins cover `[0, bin_width * bins.len())`; lines at or beyond the
/// last edge, and near-vertical lines with `|dx| < 1 px`, go to `overflow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectHistogram {
    pub bin_width: f64,
    pub bins: Vec<usize>,
    pub overflow: usize,
}

impl AspectHistogram {
    pub fn total(&self) -> usize {
        self.bins.iter().sum::<usize>() + self.overflow
    }

    /// Fraction of lines whose ratio is below `limit` (rounded to a bin edge).
    pub fn fraction_below(&self, limit: f64) -> f64 {
        let edge = (limit / self.bin_width).round() as usize;
        let n: usize = self.bins.iter().take(edge).sum();
        n as f64 / self.total().max(1) as f64
    }

    /// Index of the most populated regular bin, `None` when the overflow
    /// bucket dominates.
    pub fn modal_bin(&self) -> Option<usize> {
        let (idx, &count) = self
            .bins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        (count >= self.overflow).then_some(idx)
    }

    /// `(lower, upper, count)` rows; the overflow row has an infinite upper edge.
    pub fn rows(&self) -> Vec<(f64, f64, usize)> {
        let mut rows: Vec<(f64, f64, usize)> = self
            .bins
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as f64 * self.bin_width, (i + 1) as f64 * self.bin_width, c))
            .collect();
        rows.push((self.bins.len() as f64 * self.bin_width, f64::INFINITY, self.overflow));
        rows
    }
}

pub const DEFAULT_BIN_WIDTH: f64 = 0.05;
pub const DEFAULT_BIN_COUNT: usize = 20;

pub fn line_aspect_ratio(line: &LineAnnotation) -> Option<f64> {
    let dx = (line.p2.x - line.p1.x).abs();
    let dy = (line.p2.y - line.p1.y).abs();
    (dx >= 1.0).then(|| dy / dx)
}

pub fn dataset_line_aspect_stats<'a>(
    annotations: impl IntoIterator<Item = &'a LineAnnotation>,
    bin_width: f64,
    bin_count: usize,
) -> Result<AspectHistogram, DataError> {
    if !(bin_width > 0.0) || bin_count == 0 {
        return Err(DataError::Config(format!(
            "invalid histogram layout: {bin_count} bins of width {bin_width}"
        )));
    }
    let mut hist = AspectHistogram {
        bin_width,
        bins: vec![0; bin_count],
        overflow: 0,
    };
    for line in annotations {
        match line_aspect_ratio(line) {
            Some(r) => {
                let idx = (r / bin_width).floor() as usize;
                match hist.bins.get_mut(idx) {
                    Some(b) => *b += 1,
                    None => hist.overflow += 1,
                }
            }
            None => hist.overflow += 1,
        }
    }
    if hist.total() == 0 {
        return Err(DataError::Empty("no stair lines in dataset".into()));
    }
    Ok(hist)
}
