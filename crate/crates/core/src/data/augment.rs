//! Training-time augmentations: horizontal mirror and random occlusion.

use super::annotation::{LineAnnotation, Point};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mirrors the image left-right with the given probability.
///
/// Endpoints map through `x -> width - x` and are reordered left first.
pub fn mirror_augment(
    image: &RgbImage,
    annotations: &[LineAnnotation],
    probability: f64,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<LineAnnotation>) {
    if !rng.random_bool(probability.clamp(0.0, 1.0)) {
        return (image.clone(), annotations.to_vec());
    }
    (
        image::imageops::flip_horizontal(image),
        mirror_annotations(annotations, image.width() as f64),
    )
}

pub fn mirror_annotations(annotations: &[LineAnnotation], width: f64) -> Vec<LineAnnotation> {
    annotations
        .iter()
        .map(|a| {
            LineAnnotation::new(
                a.cls,
                Point::new(width - a.p1.x, a.p1.y),
                Point::new(width - a.p2.x, a.p2.y),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub min_rects: usize,
    pub max_rects: usize,
    /// Area of each rectangle as a fraction of the image area.
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            min_rects: 1,
            max_rects: 3,
            min_area: 0.05,
            max_area: 0.20,
        }
    }
}

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

/// Draws a random rectangle covering `area` (fraction of the image) with a
/// random aspect ratio, clamped to the image.
pub(crate) fn random_rect(width: u32, height: u32, area: f64, rng: &mut impl Rng) -> Rect {
    let target = area * width as f64 * height as f64;
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let w = (target * aspect).sqrt().round().clamp(1.0, width as f64);
    let h = (target / w).round().clamp(1.0, height as f64);
    let (w, h) = (w as u32, h as u32);
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    Rect { x, y, w, h }
}

pub(crate) fn fill_rect(image: &mut RgbImage, rect: Rect, color: Rgb<u8>) {
    for py in rect.y..rect.y + rect.h {
        for px in rect.x..rect.x + rect.w {
            image.put_pixel(px, py, color);
        }
    }
}

/// Paints 1-3 uniformly colored rectangles over the image with the given
/// probability. Annotations are unaffected; returns the painted rectangles.
pub fn occlude_augment(
    image: &mut RgbImage,
    config: &OcclusionConfig,
    probability: f64,
    rng: &mut impl Rng,
) -> Vec<Rect> {
    if !rng.random_bool(probability.clamp(0.0, 1.0)) {
        return Vec::new();
    }
    let count = rng.random_range(config.min_rects..=config.max_rects.max(config.min_rects));
    let (w, h) = image.dimensions();
    (0..count)
        .map(|_| {
            let area = rng.random_range(config.min_area..=config.max_area.max(config.min_area));
            let rect = random_rect(w, h, area, rng);
            let color = Rgb([rng.random(), rng.random(), rng.random()]);
            fill_rect(image, rect, color);
            rect
        })
        .collect()
}
