//! Per-pixel feature vectors.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use super::image::ImageBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// `(x, y)`
    Position,
    /// `(x, y, v)` with `v` the BT.601 gray value.
    PositionIntensity,
    /// `(x, y, r, g, b)`
    PositionColor,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Position => 2,
            FeatureKind::PositionIntensity => 3,
            FeatureKind::PositionColor => 5,
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xy" | "position" => Ok(FeatureKind::Position),
            "xyv" | "position+intensity" => Ok(FeatureKind::PositionIntensity),
            "xyrgb" | "position+color" => Ok(FeatureKind::PositionColor),
            _ => Err(Error::InvalidParameter(format!(
                "unknown feature kind '{s}' (xy, xyv, xyrgb)"
            ))),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Position => "xy",
            FeatureKind::PositionIntensity => "xyv",
            FeatureKind::PositionColor => "xyrgb",
        })
    }
}

/// Feature kind plus one positive scale per feature dimension. Positions
/// are in pixels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecipe {
    pub kind: FeatureKind,
    pub scales: Vec<f64>,
}

impl FeatureRecipe {
    pub fn new(kind: FeatureKind, scales: Vec<f64>) -> Result<Self> {
        if scales.len() != kind.dim() {
            return Err(Error::RecipeMismatch(format!(
                "{kind} needs {} scales, got {}",
                kind.dim(),
                scales.len()
            )));
        }
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::RecipeMismatch("feature scales must be positive".into()));
        }
        Ok(FeatureRecipe { kind, scales })
    }

    /// One scale shared by both positions, one shared by all value features.
    pub fn split(kind: FeatureKind, position: f64, value: f64) -> Result<Self> {
        let mut scales = vec![position; 2];
        scales.resize(kind.dim(), value);
        Self::new(kind, scales)
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }
}

/// 8-bit value scales converted to unit-range pixel values.
const VALUE_UNIT: f64 = 255.0;

/// Colour upsampling scales per factor (position per high-res pixel,
/// intensity per unit value).
pub fn upsample_recipe(factor: usize) -> Result<FeatureRecipe> {
    let position = match factor {
        0 | 1 => return Err(Error::InvalidParameter("upsampling factor must be >= 2".into())),
        2 => 0.13,
        3..=4 => 0.06,
        5..=8 => 0.03,
        _ => 0.02,
    };
    FeatureRecipe::split(FeatureKind::PositionIntensity, position, 0.17 * VALUE_UNIT)
}

/// `(x, y, v)` scales for gray-image denoising.
pub fn denoise_recipe() -> FeatureRecipe {
    FeatureRecipe::split(FeatureKind::PositionIntensity, 0.35, 6.0).expect("valid constants")
}

/// `n x d` scaled features, row `y * width + x`.
pub fn make_features(img: &ImageBuffer, recipe: &FeatureRecipe) -> Result<Array2<f64>> {
    let source = match recipe.kind {
        FeatureKind::Position => None,
        FeatureKind::PositionIntensity => Some(img.to_gray()),
        FeatureKind::PositionColor => {
            if img.channels() != 3 {
                return Err(Error::RecipeMismatch(format!(
                    "colour features need an RGB image, got {} channel(s)",
                    img.channels()
                )));
            }
            Some(img.clone())
        }
    };
    let d = recipe.dim();
    let w = img.width();
    let mut out = Array2::zeros((img.len(), d));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let (x, y) = (i % w, i / w);
        row[0] = x as f64 * recipe.scales[0];
        row[1] = y as f64 * recipe.scales[1];
        if let Some(src) = &source {
            for c in 0..src.channels() {
                row[2 + c] = src.get(x, y, c) * recipe.scales[2 + c];
            }
        }
    }
    Ok(out)
}
