//! Procedural staircase scenes with exact line annotations.
//!
//! A scene is a frontal staircase: `n` steps whose heights shrink
//! geometrically toward the top, each step split into a riser band (below)
//! and a tread band (above). Every riser contributes a concave line at its
//! bottom and a convex line at its top, so from top to bottom the lines
//! alternate convex, concave, ..., starting with the convex nosing of the
//! highest step.

use super::annotation::{LineAnnotation, LineClass, Point};
use super::augment::{fill_rect, random_rect, Rect};
use super::DataError;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Closed interval `[min, max]` sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T> Span<T> {
    pub const fn new(min: T, max: T) -> Self {
        Span { min, max }
    }
}

impl Span<f64> {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn check(&self, name: &str) -> Result<(), DataError> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(DataError::Config(format!(
                "{name}: empty or non-finite range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

impl Span<u32> {
    fn sample(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.min..=self.max.max(self.min))
    }

    fn check(&self, name: &str) -> Result<(), DataError> {
        if self.min > self.max {
            return Err(DataError::Config(format!(
                "{name}: empty range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneParams {
    pub seed: u64,
    pub image_size: u32,
    pub step_count: Span<u32>,
    /// Slope (dy/dx) shared by all step lines of a scene.
    pub perspective_skew: Span<f64>,
    /// Ratio between the heights of consecutive steps, bottom to top.
    pub line_spacing_decay: Span<f64>,
    /// Fraction of each step's height taken by the riser band.
    pub riser_fraction: Span<f64>,
    /// Base gray level of the stair material.
    pub brightness: Span<f64>,
    /// Linear shading strength across the image.
    pub shading: Span<f64>,
    pub noise_sigma: Span<f64>,
    pub occluder_count: Span<u32>,
    /// Area of each occluder as a fraction of the image.
    pub occluder_area: Span<f64>,
    /// Smallest admissible step height in pixels.
    pub min_step_height: f64,
}

impl Default for SyntheticSceneParams {
    fn default() -> Self {
        SyntheticSceneParams {
            seed: 0,
            image_size: 512,
            step_count: Span::new(3, 8),
            perspective_skew: Span::new(-0.22, 0.22),
            line_spacing_decay: Span::new(0.85, 0.97),
            riser_fraction: Span::new(0.35, 0.6),
            brightness: Span::new(80.0, 200.0),
            shading: Span::new(-0.3, 0.3),
            noise_sigma: Span::new(2.0, 8.0),
            occluder_count: Span::new(0, 1),
            occluder_area: Span::new(0.02, 0.06),
            min_step_height: 12.0,
        }
    }
}

impl SyntheticSceneParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.image_size < 64 {
            return Err(DataError::Config(format!(
                "image_size {} is too small for a staircase",
                self.image_size
            )));
        }
        self.step_count.check("step_count")?;
        if self.step_count.min == 0 {
            return Err(DataError::Config("step_count must be at least 1".into()));
        }
        self.perspective_skew.check("perspective_skew")?;
        self.line_spacing_decay.check("line_spacing_decay")?;
        if self.line_spacing_decay.min <= 0.0 || self.line_spacing_decay.max > 1.0 {
            return Err(DataError::Config(
                "line_spacing_decay must lie in (0, 1]".into(),
            ));
        }
        self.riser_fraction.check("riser_fraction")?;
        if self.riser_fraction.min <= 0.0 || self.riser_fraction.max >= 1.0 {
            return Err(DataError::Config("riser_fraction must lie in (0, 1)".into()));
        }
        self.brightness.check("brightness")?;
        self.shading.check("shading")?;
        self.noise_sigma.check("noise_sigma")?;
        if self.noise_sigma.min < 0.0 {
            return Err(DataError::Config("noise_sigma must be non-negative".into()));
        }
        self.occluder_count.check("occluder_count")?;
        self.occluder_area.check("occluder_area")?;
        if self.occluder_area.min < 0.0 || self.occluder_area.max > 1.0 {
            return Err(DataError::Config("occluder_area must lie in [0, 1]".into()));
        }
        if self.min_step_height <= 0.0 || !self.min_step_height.is_finite() {
            return Err(DataError::Config("min_step_height must be positive".into()));
        }
        Ok(())
    }
}

/// A rendered scene plus the values drawn for it.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub image: RgbImage,
    /// Lines ordered top to bottom.
    pub annotations: Vec<LineAnnotation>,
    pub occluders: Vec<Rect>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn generate_synthetic_scene(params: &SyntheticSceneParams) -> Result<SyntheticScene, DataError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let size = params.image_size as f64;

    let steps = params.step_count.sample(&mut rng) as usize;
    let slope = params.perspective_skew.sample(&mut rng);
    let decay = params.line_spacing_decay.sample(&mut rng);
    let riser = params.riser_fraction.sample(&mut rng);

    // Keep the skewed lines inside the image.
    let margin = slope.abs() * size / 2.0 + 2.0;
    let top = rng.random_range(margin + 0.02 * size..=margin + 0.25 * size);
    let bottom = rng.random_range(size - margin - 0.12 * size..=size - margin);
    let x_left = rng.random_range(0.0..=0.2 * size);
    let x_right = rng.random_range(0.8 * size..=size);

    let height = bottom - top;
    let first = if decay < 1.0 {
        height * (1.0 - decay) / (1.0 - decay.powi(steps as i32))
    } else {
        height / steps as f64
    };
    let smallest = first * decay.powi(steps as i32 - 1);
    if smallest * riser.min(1.0 - riser) < params.min_step_height * 0.3
        || smallest < params.min_step_height
    {
        return Err(DataError::Infeasible(format!(
            "{steps} steps leave a top step of {smallest:.1} px (minimum {})",
            params.min_step_height
        )));
    }

    // Line heights at the image's centre column, bottom step first.
    let mut centres = Vec::with_capacity(2 * steps);
    let mut step_bottom = bottom;
    for k in 0..steps {
        let h = first * decay.powi(k as i32);
        centres.push((step_bottom, LineClass::Concave));
        centres.push((step_bottom - riser * h, LineClass::Convex));
        step_bottom -= h;
    }
    centres.reverse();

    let mid = size / 2.0;
    let annotations: Vec<LineAnnotation> = centres
        .iter()
        .map(|&(yc, cls)| {
            let xl = round2(x_left);
            let xr = round2(x_right);
            LineAnnotation::new(
                cls,
                Point::new(xl, round2(yc + slope * (xl - mid))),
                Point::new(xr, round2(yc + slope * (xr - mid))),
            )
        })
        .collect();

    // Palette.
    let base = params.brightness.sample(&mut rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..=1.15));
    let tread_gain = rng.random_range(1.0..=1.2);
    let riser_gain = rng.random_range(0.5..=0.75);
    let floor_gain = rng.random_range(0.9..=1.25);
    let wall_gain = rng.random_range(0.3..=1.3);
    let wall_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..=1.3));
    let shade_x = params.shading.sample(&mut rng);
    let shade_y = params.shading.sample(&mut rng);
    let sigma = params.noise_sigma.sample(&mut rng);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");

    let lines: Vec<(f64, f64, f64)> = annotations
        .iter()
        .map(|a| {
            let k = (a.p2.y - a.p1.y) / (a.p2.x - a.p1.x);
            (a.p1.x, a.p1.y, k)
        })
        .collect();
    let n_lines = lines.len();

    let dim = params.image_size;
    let mut image = RgbImage::new(dim, dim);
    for py in 0..dim {
        for px in 0..dim {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let shade = 1.0 + shade_x * (x / size - 0.5) + shade_y * (y / size - 0.5);
            let (gain, tint) = if x < x_left || x > x_right {
                (wall_gain, &wall_tint)
            } else {
                let above = lines
                    .iter()
                    .filter(|&&(x0, y0, k)| y0 + k * (x - x0) < y)
                    .count();
                let gain = if above == 0 {
                    tread_gain * 0.95
                } else if above == n_lines {
                    floor_gain
                } else if above % 2 == 1 {
                    riser_gain
                } else {
                    tread_gain
                };
                (gain, &tint)
            };
            let mut rgb = [0u8; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let mut v = base * gain * tint[c] * shade;
                if sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                *out = to_u8(v);
            }
            image.put_pixel(px, py, Rgb(rgb));
        }
    }

    let occluder_count = params.occluder_count.sample(&mut rng);
    let mut occluders = Vec::new();
    for _ in 0..occluder_count {
        let area = params.occluder_area.sample(&mut rng);
        let rect = random_rect(dim, dim, area, &mut rng);
        let color = Rgb([rng.random(), rng.random(), rng.random()]);
        fill_rect(&mut image, rect, color);
        occluders.push(rect);
    }

    Ok(SyntheticScene {
        image,
        annotations,
        occluders,
    })
}
