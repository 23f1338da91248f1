//! Line annotations in the plain-text `cls x1 y1 x2 y2` format.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Stair line class. The numeric value is the annotation file code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LineClass {
    Convex = 0,
    Concave = 1,
}

impl LineClass {
    pub const ALL: [LineClass; 2] = [LineClass::Convex, LineClass::Concave];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(LineClass::Convex),
            1 => Some(LineClass::Concave),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Orders two endpoints left first, breaking ties on `x` by smaller `y`.
pub(crate) fn left_first(a: Point, b: Point) -> (Point, Point) {
    if (a.x, a.y) <= (b.x, b.y) {
        (a, b)
    } else {
        (b, a)
    }
}

/// One stair line in image coordinates (origin top-left, y down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineAnnotation {
    pub cls: LineClass,
    pub p1: Point,
    pub p2: Point,
}

impl LineAnnotation {
    /// Builds an annotation with endpoints reordered left first.
    pub fn new(cls: LineClass, a: Point, b: Point) -> Self {
        let (p1, p2) = left_first(a, b);
        LineAnnotation { cls, p1, p2 }
    }

    pub fn length(&self) -> f64 {
        self.p1.dist(self.p2)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("line {line}: expected 5 fields `cls x1 y1 x2 y2`, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: `{token}` is not a number")]
    NotANumber { line: usize, token: String },
    #[error("line {line}: class must be 0 or 1, got `{token}`")]
    BadClass { line: usize, token: String },
    #[error("line {line}: coordinate {value} outside [0, {limit}]")]
    OutOfBounds { line: usize, value: f64, limit: f64 },
}

impl AnnotationError {
    pub fn line(&self) -> usize {
        match self {
            AnnotationError::FieldCount { line, .. }
            | AnnotationError::NotANumber { line, .. }
            | AnnotationError::BadClass { line, .. }
            | AnnotationError::OutOfBounds { line, .. } => *line,
        }
    }
}

/// Parses annotations for a 512x512 image.
pub fn parse_annotation(text: &str) -> Result<Vec<LineAnnotation>, AnnotationError> {
    parse_annotation_with_bounds(text, 512.0)
}

pub fn parse_annotation_with_bounds(
    text: &str,
    image_size: f64,
) -> Result<Vec<LineAnnotation>, AnnotationError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 5 {
            return Err(AnnotationError::FieldCount {
                line,
                found: tokens.len(),
            });
        }
        let cls = match tokens[0].parse::<f64>() {
            Ok(v) if v == 0.0 => LineClass::Convex,
            Ok(v) if v == 1.0 => LineClass::Concave,
            Ok(_) => {
                return Err(AnnotationError::BadClass {
                    line,
                    token: tokens[0].to_string(),
                })
            }
            Err(_) => {
                return Err(AnnotationError::NotANumber {
                    line,
                    token: tokens[0].to_string(),
                })
            }
        };
        let mut coords = [0.0f64; 4];
        for (slot, token) in coords.iter_mut().zip(&tokens[1..]) {
            let v: f64 = token.parse().map_err(|_| AnnotationError::NotANumber {
                line,
                token: token.to_string(),
            })?;
            if !v.is_finite() {
                return Err(AnnotationError::NotANumber {
                    line,
                    token: token.to_string(),
                });
            }
            if !(0.0..=image_size).contains(&v) {
                return Err(AnnotationError::OutOfBounds {
                    line,
                    value: v,
                    limit: image_size,
                });
            }
            *slot = v;
        }
        out.push(LineAnnotation::new(
            cls,
            Point::new(coords[0], coords[1]),
            Point::new(coords[2], coords[3]),
        ));
    }
    Ok(out)
}

/// One newline-terminated line per annotation, numbers in shortest
/// round-trip decimal form.
pub fn serialize_annotation(annotations: &[LineAnnotation]) -> String {
    let mut s = String::new();
    for a in annotations {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            a.cls.index(),
            a.p1.x,
            a.p1.y,
            a.p2.x,
            a.p2.y
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_the_documented_format() {
        let a = parse_annotation("0 10 20 100 25").unwrap();
        assert_eq!(
            a,
            vec![LineAnnotation {
                cls: LineClass::Convex,
                p1: Point::new(10., 20.),
                p2: Point::new(100., 25.)
            }]
        );
    }

    #[test]
    fn reorders_endpoints_left_first() {
        let a = parse_annotation("1 100 25 10 20").unwrap();
        assert_eq!(a[0].cls, LineClass::Concave);
        assert_eq!(a[0].p1, Point::new(10., 20.));
        assert_eq!(a[0].p2, Point::new(100., 25.));

        let v = parse_annotation("0 50 40 50 10").unwrap();
        assert_eq!(v[0].p1, Point::new(50., 10.));
    }

    #[test]
    fn reports_line_numbers() {
        assert_eq!(
            parse_annotation("0 10 20 100"),
            Err(AnnotationError::FieldCount { line: 1, found: 4 })
        );
        let err = parse_annotation("0 1 2 3 4\n\n2 1 2 3 4").unwrap_err();
        assert_eq!(err.line(), 3);
        assert!(matches!(err, AnnotationError::BadClass { .. }));
        let err = parse_annotation("0 1 2 3 x").unwrap_err();
        assert!(matches!(err, AnnotationError::NotANumber { line: 1, .. }));
        let err = parse_annotation("0 1 2 3 513").unwrap_err();
        assert!(matches!(err, AnnotationError::OutOfBounds { line: 1, .. }));
    }

    #[test]
    fn accepts_decimals_and_blank_lines() {
        let a = parse_annotation("\n1 0.5 1.25 511.75 512\n").unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].p2, Point::new(511.75, 512.));
    }

    #[test]
    fn serializes_the_documented_format() {
        assert_eq!(serialize_annotation(&[]), "");
        let a = LineAnnotation::new(LineClass::Convex, Point::new(10., 20.), Point::new(100., 25.));
        assert_eq!(serialize_annotation(&[a]), "0 10 20 100 25\n");
    }

    fn arb_annotation() -> impl Strategy<Value = LineAnnotation> {
        (0usize..2, 0.0..=512.0f64, 0.0..=512.0f64, 0.0..=512.0f64, 0.0..=512.0f64).prop_map(
            |(c, x1, y1, x2, y2)| {
                LineAnnotation::new(
                    LineClass::from_index(c).unwrap(),
                    Point::new(x1, y1),
                    Point::new(x2, y2),
                )
            },
        )
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(anns in prop::collection::vec(arb_annotation(), 0..20)) {
            let text = serialize_annotation(&anns);
            prop_assert_eq!(parse_annotation(&text).unwrap(), anns);
        }
    }
}
