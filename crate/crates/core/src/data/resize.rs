//! Pad-to-square and resize, with the matching coordinate transform.

use super::annotation::{LineAnnotation, Point};
use super::grid::clip_segment;
use image::{imageops, Rgb, RgbImage};

/// Mid-gray used for padding unless configured otherwise.
pub const DEFAULT_PAD_GRAY: u8 = 128;

/// Maps source pixel coordinates to the padded, resized image:
/// `target = (source + pad) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub pad_x: f64,
    pub pad_y: f64,
    pub scale: f64,
}

impl Letterbox {
    pub const IDENTITY: Letterbox = Letterbox {
        pad_x: 0.0,
        pad_y: 0.0,
        scale: 1.0,
    };

    pub fn to_target(&self, p: Point) -> Point {
        Point::new((p.x + self.pad_x) * self.scale, (p.y + self.pad_y) * self.scale)
    }

    pub fn to_source(&self, p: Point) -> Point {
        Point::new(p.x / self.scale - self.pad_x, p.y / self.scale - self.pad_y)
    }

    pub fn annotations_to_target(&self, lines: &[LineAnnotation]) -> Vec<LineAnnotation> {
        lines
            .iter()
            .map(|l| LineAnnotation::new(l.cls, self.to_target(l.p1), self.to_target(l.p2)))
            .collect()
    }

    pub fn annotations_to_source(&self, lines: &[LineAnnotation]) -> Vec<LineAnnotation> {
        lines
            .iter()
            .map(|l| LineAnnotation::new(l.cls, self.to_source(l.p1), self.to_source(l.p2)))
            .collect()
    }

    /// Maps lines back to a `width x height` source image, clipping away the
    /// parts that fall in the padding. Lines with nothing left are dropped.
    pub fn annotations_to_source_clipped(
        &self,
        lines: &[LineAnnotation],
        width: u32,
        height: u32,
    ) -> Vec<LineAnnotation> {
        self.annotations_to_source(lines)
            .into_iter()
            .filter_map(|l| {
                let (a, b) = clip_segment(l.p1, l.p2, 0.0, width as f64, 0.0, height as f64)?;
                (a.dist(b) > 0.0).then(|| LineAnnotation::new(l.cls, a, b))
            })
            .collect()
    }
}

/// Centers `image` on a square canvas filled with `pad`, then resizes it to
/// `size x size`. Images already at that size are returned unchanged.
pub fn letterbox(image: &RgbImage, size: u32, pad: [u8; 3]) -> (RgbImage, Letterbox) {
    let (w, h) = image.dimensions();
    if w == size && h == size {
        return (image.clone(), Letterbox::IDENTITY);
    }
    let side = w.max(h).max(1);
    let (ox, oy) = ((side - w) / 2, (side - h) / 2);
    let mut canvas = RgbImage::from_pixel(side, side, Rgb(pad));
    imageops::replace(&mut canvas, image, ox as i64, oy as i64);
    let resized = if side == size {
        canvas
    } else {
        imageops::resize(&canvas, size, size, imageops::FilterType::Triangle)
    };
    (
        resized,
        Letterbox {
            pad_x: ox as f64,
            pad_y: oy as f64,
            scale: size as f64 / side as f64,
        },
    )
}
