//! Cell-grid label encoding.
//!
//! The image is tiled into `grid_n x grid_n` square cells. Every annotation
//! is clipped against each cell it crosses; a cell stores at most one
//! segment per class, in cell-normalized coordinates: slot 1 (channels 0..4)
//! holds the convex segment and slot 2 (channels 4..8) the concave one. A
//! cell with a single class copies its segment into both slots.
//!
//! Cell `(r, c)` owns `x in [c*s, (c+1)*s)` and `y in [r*s, (r+1)*s)`; the
//! last row and column also own the image's bottom and right edges.

use super::annotation::{left_first, LineAnnotation, LineClass, Point};
use super::DataError;
use serde::{Deserialize, Serialize};

/// Clipped pieces shorter than this many pixels are dropped.
pub const MIN_CLIP_LEN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub image_size: usize,
    pub grid_n: usize,
    pub cell_size: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            image_size: 512,
            grid_n: 64,
            cell_size: 8,
        }
    }
}

impl GridConfig {
    pub fn new(image_size: usize, grid_n: usize) -> Result<Self, DataError> {
        if grid_n == 0 || image_size == 0 || image_size % grid_n != 0 {
            return Err(DataError::Config(format!(
                "image size {image_size} is not a positive multiple of grid size {grid_n}"
            )));
        }
        Ok(GridConfig {
            image_size,
            grid_n,
            cell_size: image_size / grid_n,
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let expected = GridConfig::new(self.image_size, self.grid_n)?;
        if expected != *self {
            return Err(DataError::Config(format!(
                "cell size {} does not match {}/{}",
                self.cell_size, self.image_size, self.grid_n
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_n * self.grid_n
    }

    /// Maps a cell-normalized point of cell `(row, col)` to image coordinates.
    pub fn to_image(&self, row: usize, col: usize, p: Point) -> Point {
        let s = self.cell_size as f64;
        Point::new((col as f64 + p.x) * s, (row as f64 + p.y) * s)
    }

    /// Maps an image point into the normalized frame of cell `(row, col)`.
    pub fn to_cell(&self, row: usize, col: usize, p: Point) -> Point {
        let s = self.cell_size as f64;
        Point::new(p.x / s - col as f64, p.y / s - row as f64)
    }
}

/// Which stair lines a cell contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellClass {
    ConvexOnly,
    ConcaveOnly,
    Both,
    Background,
}

impl CellClass {
    pub const FOREGROUND: [CellClass; 3] =
        [CellClass::ConvexOnly, CellClass::ConcaveOnly, CellClass::Both];

    pub fn from_flags(convex: bool, concave: bool) -> Self {
        match (convex, concave) {
            (true, false) => CellClass::ConvexOnly,
            (false, true) => CellClass::ConcaveOnly,
            (true, true) => CellClass::Both,
            (false, false) => CellClass::Background,
        }
    }

    pub fn contains(self, cls: LineClass) -> bool {
        matches!(
            (self, cls),
            (CellClass::ConvexOnly | CellClass::Both, LineClass::Convex)
                | (CellClass::ConcaveOnly | CellClass::Both, LineClass::Concave)
        )
    }

    /// Index among the foreground classes, `None` for background.
    pub fn foreground_index(self) -> Option<usize> {
        match self {
            CellClass::ConvexOnly => Some(0),
            CellClass::ConcaveOnly => Some(1),
            CellClass::Both => Some(2),
            CellClass::Background => None,
        }
    }
}

/// A piece of a stair line inside one cell, in that cell's normalized frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSegment {
    pub row: usize,
    pub col: usize,
    pub cls: LineClass,
    pub p1: Point,
    pub p2: Point,
}

impl CellSegment {
    pub fn length(&self) -> f64 {
        self.p1.dist(self.p2)
    }
}

/// A segment read off a label or prediction grid, in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedSegment {
    pub row: usize,
    pub col: usize,
    pub cls: LineClass,
    pub p1: Point,
    pub p2: Point,
    /// Classification score of the channel that produced the segment.
    pub score: f32,
}

impl DetectedSegment {
    pub fn to_cell_segment(&self, grid: &GridConfig) -> CellSegment {
        CellSegment {
            row: self.row,
            col: self.col,
            cls: self.cls,
            p1: grid.to_cell(self.row, self.col, self.p1),
            p2: grid.to_cell(self.row, self.col, self.p2),
        }
    }

    pub fn to_annotation(&self) -> LineAnnotation {
        LineAnnotation::new(self.cls, self.p1, self.p2)
    }
}

/// Liang-Barsky clip of `a`-`b` against the closed rectangle.
pub(crate) fn clip_segment(a: Point, b: Point, xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Option<(Point, Point)> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, a.x - xmin),
        (dx, xmax - a.x),
        (-dy, a.y - ymin),
        (dy, ymax - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
        if t0 > t1 {
            return None;
        }
    }
    let at = |t: f64| Point::new(a.x + t * dx, a.y + t * dy);
    Some((at(t0), at(t1)))
}

/// Clips one annotation against every cell it crosses.
pub fn clip_to_cells(ann: &LineAnnotation, grid: &GridConfig) -> Vec<CellSegment> {
    let s = grid.cell_size as f64;
    let last = grid.grid_n - 1;
    let cell_of = |v: f64| ((v / s).floor().max(0.0) as usize).min(last);
    let (a, b) = (ann.p1, ann.p2);
    let (c0, c1) = (cell_of(a.x.min(b.x)), cell_of(a.x.max(b.x)));
    let (r0, r1) = (cell_of(a.y.min(b.y)), cell_of(a.y.max(b.y)));
    let mut out = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (xmin, ymin) = (col as f64 * s, row as f64 * s);
            let Some((p, q)) = clip_segment(a, b, xmin, xmin + s, ymin, ymin + s) else {
                continue;
            };
            if p.dist(q) < MIN_CLIP_LEN {
                continue;
            }
            // A piece lying on the shared bottom/right edge belongs to the
            // neighbouring cell.
            if row < last && p.y == ymin + s && q.y == ymin + s {
                continue;
            }
            if col < last && p.x == xmin + s && q.x == xmin + s {
                continue;
            }
            let norm = |pt: Point| {
                let n = grid.to_cell(row, col, pt);
                Point::new(n.x.clamp(0.0, 1.0), n.y.clamp(0.0, 1.0))
            };
            let (p1, p2) = left_first(norm(p), norm(q));
            out.push(CellSegment {
                row,
                col,
                cls: ann.cls,
                p1,
                p2,
            });
        }
    }
    out
}

/// Ground-truth tensors, channel-major: `cls_target[k][r][c]`, `loc_target[ch][r][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub grid: GridConfig,
    pub cls_target: Vec<f32>,
    pub loc_target: Vec<f32>,
}

impl LabelGrid {
    pub fn empty(grid: GridConfig) -> Self {
        LabelGrid {
            grid,
            cls_target: vec![0.0; 2 * grid.cells()],
            loc_target: vec![0.0; 8 * grid.cells()],
        }
    }

    fn index(&self, ch: usize, row: usize, col: usize) -> usize {
        (ch * self.grid.grid_n + row) * self.grid.grid_n + col
    }

    pub fn cls(&self, row: usize, col: usize, cls: LineClass) -> f32 {
        self.cls_target[self.index(cls.index(), row, col)]
    }

    /// `(x1, y1, x2, y2)` of slot `cls` (slot 1 = convex, slot 2 = concave).
    pub fn slot(&self, row: usize, col: usize, cls: LineClass) -> [f32; 4] {
        let base = cls.index() * 4;
        std::array::from_fn(|i| self.loc_target[self.index(base + i, row, col)])
    }

    fn set_slot(&mut self, row: usize, col: usize, slot: usize, seg: &CellSegment) {
        let vals = [seg.p1.x, seg.p1.y, seg.p2.x, seg.p2.y];
        for (i, v) in vals.into_iter().enumerate() {
            let idx = self.index(slot * 4 + i, row, col);
            self.loc_target[idx] = v as f32;
        }
    }

    pub fn cell_class(&self, row: usize, col: usize) -> CellClass {
        CellClass::from_flags(
            self.cls(row, col, LineClass::Convex) >= 0.5,
            self.cls(row, col, LineClass::Concave) >= 0.5,
        )
    }

    pub fn foreground_cells(&self) -> usize {
        let n = self.grid.grid_n;
        (0..n)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .filter(|&(r, c)| self.cell_class(r, c) != CellClass::Background)
            .count()
    }

    /// Decodes the grid with the ground-truth indicators as scores.
    pub fn decode(&self) -> Vec<DetectedSegment> {
        decode_grid(&self.cls_target, &self.loc_target, &self.grid, 0.5)
    }
}

/// Rasterizes annotations into grid targets.
pub fn encode_labels(annotations: &[LineAnnotation], grid: &GridConfig) -> LabelGrid {
    let n = grid.grid_n;
    // Longest clipped piece per (cell, class).
    let mut best: Vec<[Option<CellSegment>; 2]> = vec![[None, None]; grid.cells()];
    for ann in annotations {
        for seg in clip_to_cells(ann, grid) {
            let entry = &mut best[seg.row * n + seg.col][seg.cls.index()];
            if entry.is_none_or(|cur| seg.length() > cur.length()) {
                *entry = Some(seg);
            }
        }
    }
    let mut label = LabelGrid::empty(*grid);
    for (cell, slots) in best.iter().enumerate() {
        let (row, col) = (cell / n, cell % n);
        for (k, seg) in slots.iter().enumerate() {
            if let Some(seg) = seg {
                let idx = label.index(k, row, col);
                label.cls_target[idx] = 1.0;
                label.set_slot(row, col, k, seg);
            }
        }
        match slots {
            [Some(s), None] => label.set_slot(row, col, 1, s),
            [None, Some(s)] => label.set_slot(row, col, 0, s),
            _ => {}
        }
    }
    label
}

/// Emits one segment per channel at or above `threshold`, read from that
/// class's slot and mapped back to image coordinates.
pub fn decode_grid(
    cls_scores: &[f32],
    loc: &[f32],
    grid: &GridConfig,
    threshold: f32,
) -> Vec<DetectedSegment> {
    let n = grid.grid_n;
    let cells = grid.cells();
    assert_eq!(cls_scores.len(), 2 * cells, "classification grid size");
    assert_eq!(loc.len(), 8 * cells, "location grid size");
    let mut out = Vec::new();
    for row in 0..n {
        for col in 0..n {
            for cls in LineClass::ALL {
                let score = cls_scores[(cls.index() * n + row) * n + col];
                if score < threshold {
                    continue;
                }
                let v = |i: usize| loc[((cls.index() * 4 + i) * n + row) * n + col] as f64;
                out.push(DetectedSegment {
                    row,
                    col,
                    cls,
                    p1: grid.to_image(row, col, Point::new(v(0), v(1))),
                    p2: grid.to_image(row, col, Point::new(v(2), v(3))),
                    score,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(cls: LineClass, x1: f64, y1: f64, x2: f64, y2: f64) -> LineAnnotation {
        LineAnnotation::new(cls, Point::new(x1, y1), Point::new(x2, y2))
    }

    #[test]
    fn axis_aligned_line_fills_both_slots() {
        let g = GridConfig::default();
        let label = encode_labels(&[line(LineClass::Convex, 0., 4., 16., 4.)], &g);
        for col in 0..2 {
            assert_eq!(label.cell_class(0, col), CellClass::ConvexOnly);
            assert_eq!(label.slot(0, col, LineClass::Convex), [0., 0.5, 1., 0.5]);
            assert_eq!(label.slot(0, col, LineClass::Concave), [0., 0.5, 1., 0.5]);
        }
        assert_eq!(label.foreground_cells(), 2);
    }

    #[test]
    fn diagonal_line_is_clipped_per_cell() {
        let g = GridConfig::default();
        let label = encode_labels(&[line(LineClass::Convex, 4., 2., 12., 6.)], &g);
        assert_eq!(label.slot(0, 0, LineClass::Convex), [0.5, 0.25, 1.0, 0.5]);
        assert_eq!(label.slot(0, 1, LineClass::Convex), [0.0, 0.5, 0.5, 0.75]);
        assert_eq!(label.slot(0, 0, LineClass::Concave), [0.5, 0.25, 1.0, 0.5]);
        assert_eq!(label.slot(0, 1, LineClass::Concave), [0.0, 0.5, 0.5, 0.75]);
        assert_eq!(label.foreground_cells(), 2);
    }

    #[test]
    fn empty_annotations_give_zero_grid() {
        let g = GridConfig::default();
        let label = encode_labels(&[], &g);
        assert_eq!(label, LabelGrid::empty(g));
        assert!(label.decode().is_empty());
    }

    #[test]
    fn boundary_lines_belong_to_the_lower_right_cell() {
        let g = GridConfig::default();
        let label = encode_labels(&[line(LineClass::Concave, 0., 8., 8., 8.)], &g);
        assert_eq!(label.cell_class(0, 0), CellClass::Background);
        assert_eq!(label.cell_class(1, 0), CellClass::ConcaveOnly);
        // The image's own bottom edge stays in the last row.
        let label = encode_labels(&[line(LineClass::Concave, 0., 512., 8., 512.)], &g);
        assert_eq!(label.cell_class(63, 0), CellClass::ConcaveOnly);
        assert_eq!(label.slot(63, 0, LineClass::Concave), [0., 1., 1., 1.]);
    }

    #[test]
    fn corner_grazes_are_dropped() {
        let g = GridConfig::default();
        // Ends 0.28 px inside cell (1,1), touching (0,1) and (1,0) at a point.
        let label = encode_labels(&[line(LineClass::Convex, 0., 0., 8.2, 8.2)], &g);
        assert_eq!(label.cell_class(0, 1), CellClass::Background);
        assert_eq!(label.cell_class(1, 0), CellClass::Background);
        assert_eq!(label.cell_class(0, 0), CellClass::ConvexOnly);
        assert_eq!(label.cell_class(1, 1), CellClass::Background);
    }

    #[test]
    fn same_class_conflict_keeps_longest_piece() {
        let g = GridConfig::default();
        let label = encode_labels(
            &[
                line(LineClass::Convex, 0., 2., 4., 2.),
                line(LineClass::Convex, 0., 6., 8., 6.),
            ],
            &g,
        );
        assert_eq!(label.slot(0, 0, LineClass::Convex), [0., 0.75, 1., 0.75]);
    }

    #[test]
    fn both_class_cells_bind_slots_to_classes() {
        let g = GridConfig::default();
        let label = encode_labels(
            &[
                line(LineClass::Concave, 0., 6., 8., 6.),
                line(LineClass::Convex, 0., 2., 8., 2.),
            ],
            &g,
        );
        assert_eq!(label.cell_class(0, 0), CellClass::Both);
        assert_eq!(label.slot(0, 0, LineClass::Convex), [0., 0.25, 1., 0.25]);
        assert_eq!(label.slot(0, 0, LineClass::Concave), [0., 0.75, 1., 0.75]);
    }

    #[test]
    fn decode_maps_slots_to_image_coordinates() {
        let g = GridConfig::default();
        let mut label = LabelGrid::empty(g);
        let n = g.grid_n;
        label.cls_target[1] = 1.0; // convex, cell (0,1)
        for (i, v) in [0.0, 0.5, 0.5, 0.75].into_iter().enumerate() {
            label.loc_target[i * n * n + 1] = v;
        }
        let segs = label.decode();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].cls, LineClass::Convex);
        assert_eq!(segs[0].p1, Point::new(8., 4.));
        assert_eq!(segs[0].p2, Point::new(12., 6.));
    }

    #[test]
    fn decode_emits_each_channel_above_threshold() {
        let g = GridConfig::default();
        let cells = g.cells();
        let mut cls = vec![0.0f32; 2 * cells];
        cls[0] = 0.9;
        cls[cells] = 0.8;
        let mut loc = vec![0.0f32; 8 * cells];
        for i in 0..4 {
            loc[i * cells] = 0.1;
            loc[(4 + i) * cells] = 0.9;
        }
        let segs = decode_grid(&cls, &loc, &g, 0.5);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].cls, LineClass::Convex);
        assert!((segs[0].p1.x - 0.8).abs() < 1e-5);
        assert_eq!(segs[1].cls, LineClass::Concave);
        assert!((segs[1].p1.x - 7.2).abs() < 1e-5);
    }

    #[test]
    fn grid_config_rejects_uneven_tiling() {
        assert!(GridConfig::new(512, 64).is_ok());
        assert!(GridConfig::new(500, 64).is_err());
        assert!(GridConfig::new(512, 0).is_err());
    }

    use proptest::prelude::*;

    fn any_line() -> impl Strategy<Value = LineAnnotation> {
        (any::<bool>(), 0.0f64..=64.0, 0.0f64..=64.0, 0.0f64..=64.0, 0.0f64..=64.0).prop_map(
            |(convex, x1, y1, x2, y2)| {
                let cls = if convex { LineClass::Convex } else { LineClass::Concave };
                line(cls, x1, y1, x2, y2)
            },
        )
    }

    proptest! {
        #[test]
        fn location_targets_only_in_labelled_cells(lines in prop::collection::vec(any_line(), 0..6)) {
            let grid = GridConfig::new(64, 8).unwrap();
            let label = encode_labels(&lines, &grid);
            let cells = grid.cells();
            for i in 0..cells {
                let flags = [label.cls_target[i], label.cls_target[cells + i]];
                let any = flags.contains(&1.0);
                for ch in 0..8 {
                    let v = label.loc_target[ch * cells + i];
                    if !any {
                        prop_assert_eq!(v, 0.0);
                    } else if v != 0.0 {
                        prop_assert!(flags[ch / 4] == 1.0 || flags[1 - ch / 4] == 1.0);
                    }
                }
            }
        }

        #[test]
        fn lines_yield_pieces_unless_short(l in any_line()) {
            let grid = GridConfig::new(64, 8).unwrap();
            let pieces = clip_to_cells(&l, &grid);
            let len = l.p1.dist(l.p2);
            if len < MIN_CLIP_LEN {
                prop_assert!(pieces.is_empty());
            }
            // A short line split across up to three cells can leave every
            // piece below the minimum; three times the minimum guarantees one.
            if len >= 3.0 * MIN_CLIP_LEN {
                prop_assert!(!pieces.is_empty());
            }
            prop_assert!(pieces.iter().all(|p| p.length() >= MIN_CLIP_LEN / grid.cell_size as f64 - 1e-12));
        }
    }
}
