//! Seeded synthetic scenes and noise for desk-scale experiments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::ImageBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn random(w: f64, h: f64, rng: &mut impl Rng) -> Self {
        if rng.gen_bool(0.5) {
            let (x0, y0) = (rng.gen_range(-0.1 * w..0.8 * w), rng.gen_range(-0.1 * h..0.8 * h));
            Shape::Rect {
                x0,
                y0,
                x1: x0 + rng.gen_range(0.15 * w..0.6 * w),
                y1: y0 + rng.gen_range(0.15 * h..0.6 * h),
            }
        } else {
            Shape::Disc {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                r: rng.gen_range(0.08..0.35) * w.min(h),
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }
}

/// Overlapping rectangles and discs of constant colour on a constant
/// background. Later shapes paint over earlier ones.
pub fn piecewise_constant(
    width: usize,
    height: usize,
    channels: usize,
    shapes: usize,
    rng: &mut impl Rng,
) -> Result<ImageBuffer> {
    let (w, h) = (width as f64, height as f64);
    let mut layers: Vec<(Shape, Vec<f64>)> = Vec::with_capacity(shapes);
    let background: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.05..0.95)).collect();
    for _ in 0..shapes {
        let color = (0..channels).map(|_| rng.gen_range(0.05..0.95)).collect();
        layers.push((Shape::random(w, h, rng), color));
    }
    ImageBuffer::from_fn(width, height, channels, |x, y, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        layers
            .iter()
            .rev()
            .find(|(s, _)| s.contains(px, py))
            .map_or(background[c], |(_, col)| col[c])
    })
}

/// Piecewise-constant regions with a gentle linear shading on top, a
/// stand-in for natural gray images in denoising runs.
pub fn shaded_scene(width: usize, height: usize, rng: &mut impl Rng) -> Result<ImageBuffer> {
    let base = piecewise_constant(width, height, 1, 6, rng)?;
    let (gx, gy) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let (w, h) = (width as f64, height as f64);
    ImageBuffer::from_fn(width, height, 1, |x, y, _| {
        base.get(x, y, 0) + gx * (x as f64 / w - 0.5) + gy * (y as f64 / h - 0.5)
    })
}

/// Additive Gaussian noise of standard deviation `sigma`, clipped to `[0, 1]`.
pub fn add_gaussian_noise(img: &ImageBuffer, sigma: f64, rng: &mut impl Rng) -> Result<ImageBuffer> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidParameter(format!("noise sigma {sigma}: {e}")))?;
    let data = img
        .data()
        .iter()
        .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::new(img.width(), img.height(), img.channels(), data)
}
