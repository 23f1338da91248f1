//! Draws detected lines onto an image: convex blue, concave red.

use image::{Rgb, RgbImage};
use stairnet::data::{LineAnnotation, LineClass, Point};

pub const CONVEX_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
pub const CONCAVE_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const LINE_WIDTH: f64 = 2.0;

fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Pixels whose centers lie within half the line width of the segment.
pub fn segment_pixels(line: &LineAnnotation, width: u32, height: u32) -> Vec<(u32, u32)> {
    let r = LINE_WIDTH / 2.0;
    let (a, b) = (line.p1, line.p2);
    let lo = |v: f64| (v - r - 1.0).floor().max(0.0) as u32;
    let hi = |v: f64, max: u32| ((v + r + 1.0).ceil().max(0.0) as u32).min(max);
    let mut out = Vec::new();
    for y in lo(a.y.min(b.y))..hi(a.y.max(b.y), height) {
        for x in lo(a.x.min(b.x))..hi(a.x.max(b.x), width) {
            let center = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            if distance_to_segment(center, a, b) <= r {
                out.push((x, y));
            }
        }
    }
    out
}

pub fn draw_overlay(image: &RgbImage, lines: &[LineAnnotation]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    for line in lines {
        let color = match line.cls {
            LineClass::Convex => CONVEX_COLOR,
            LineClass::Concave => CONCAVE_COLOR,
        };
        for (x, y) in segment_pixels(line, w, h) {
            out.put_pixel(x, y, color);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_line_is_two_pixels_thick() {
        let line = LineAnnotation::new(LineClass::Convex, Point::new(2.0, 5.0), Point::new(12.0, 5.0));
        let px = segment_pixels(&line, 20, 20);
        let rows: std::collections::BTreeSet<u32> = px.iter().map(|p| p.1).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn only_segment_pixels_change() {
        let img = RgbImage::from_fn(30, 30, |x, y| Rgb([x as u8, y as u8, 50]));
        let lines = [
            LineAnnotation::new(LineClass::Convex, Point::new(1.0, 3.0), Point::new(25.0, 8.0)),
            LineAnnotation::new(LineClass::Concave, Point::new(3.0, 20.0), Point::new(28.0, 18.0)),
        ];
        let out = draw_overlay(&img, &lines);
        let mut drawn = std::collections::HashSet::new();
        for l in &lines {
            drawn.extend(segment_pixels(l, 30, 30));
        }
        for (x, y, p) in out.enumerate_pixels() {
            if drawn.contains(&(x, y)) {
                assert!(*p == CONVEX_COLOR || *p == CONCAVE_COLOR);
            } else {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
        assert_eq!(out.get_pixel(13, 5), &CONVEX_COLOR);
        assert_eq!(out.get_pixel(15, 19), &CONCAVE_COLOR);
    }
}
