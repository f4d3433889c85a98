//! Joint bilateral upsampling and the bicubic reference.

use ndarray::{Array2, ArrayView2};

use super::features::{make_features, FeatureRecipe};
use super::image::ImageBuffer;
use crate::error::{Error, Result};
use crate::permuto::{FilterBank, FilterOptions, LatticeOperators, Signal};

/// Splats `low` at its features and slices at `high_features`.
///
/// Features are used as given (scale them beforehand). With `normalize`
/// the result is divided by the filtered point density, which a Gaussian
/// bank turns into a normalised bilateral interpolation.
pub fn upsample_guided(
    low: &Signal,
    high_features: ArrayView2<f64>,
    bank: &FilterBank,
    normalize: bool,
) -> Result<Array2<f64>> {
    let d = low.dim();
    let ops = LatticeOperators::joint(low.features.view(), high_features, &vec![1.0; d], bank.hops())?;
    let opts = FilterOptions {
        normalize,
        exclude_self: false,
    };
    Ok(ops.apply(low.values.view(), bank, opts)?.output)
}

fn integer_factor(low: &ImageBuffer, high: &ImageBuffer) -> Result<usize> {
    let f = high.width() / low.width();
    if f == 0 || low.width() * f != high.width() || low.height() * f != high.height() {
        return Err(Error::shape(format!(
            "{}x{} is not an integer upsampling of {}x{}",
            high.width(),
            high.height(),
            low.width(),
            low.height()
        )));
    }
    Ok(f)
}

/// Mean over `factor x factor` blocks.
pub fn box_downsample(img: &ImageBuffer, factor: usize) -> Result<ImageBuffer> {
    if factor == 0 || img.width() % factor != 0 || img.height() % factor != 0 {
        return Err(Error::shape(format!(
            "{}x{} is not divisible by {factor}",
            img.width(),
            img.height()
        )));
    }
    let inv = 1.0 / (factor * factor) as f64;
    ImageBuffer::from_fn(img.width() / factor, img.height() / factor, img.channels(), |x, y, c| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img.get(x * factor + dx, y * factor + dy, c);
            }
        }
        acc * inv
    })
}

/// Centre of low-res pixel `i` in high-res pixel coordinates.
fn low_to_high(i: usize, factor: usize) -> f64 {
    (i * factor) as f64 + (factor as f64 - 1.0) / 2.0
}

/// Upsamples `low` to the size of `guide`.
///
/// Low-res features come from the box-downsampled guide at the low-res pixel
/// centres, so both feature sets live in the same (high-res pixel) space.
pub fn joint_upsample(
    low: &ImageBuffer,
    guide: &ImageBuffer,
    recipe: &FeatureRecipe,
    bank: &FilterBank,
    normalize: bool,
) -> Result<ImageBuffer> {
    let factor = integer_factor(low, guide)?;
    let high_features = make_features(guide, recipe)?;
    let low_guide = box_downsample(guide, factor)?;
    let mut low_features = make_features(&low_guide, recipe)?;
    for (i, mut row) in low_features.outer_iter_mut().enumerate() {
        let (x, y) = (i % low.width(), i / low.width());
        row[0] = low_to_high(x, factor) * recipe.scales[0];
        row[1] = low_to_high(y, factor) * recipe.scales[1];
    }
    let signal = Signal::new(low.pixels(), low_features)?;
    let out = upsample_guided(&signal, high_features.view(), bank, normalize)?;
    ImageBuffer::from_pixels(guide.width(), guide.height(), out.view())
}

fn catmull_rom(t: f64) -> [f64; 4] {
    // a = -0.5
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Catmull-Rom bicubic upsampling with edge clamping and the same pixel
/// centre alignment as [`joint_upsample`].
pub fn bicubic_upsample(low: &ImageBuffer, factor: usize) -> Result<ImageBuffer> {
    if factor == 0 {
        return Err(Error::InvalidParameter("upsampling factor must be >= 1".into()));
    }
    let (w, h) = (low.width() as isize, low.height() as isize);
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let f = factor as f64;
    ImageBuffer::from_fn(low.width() * factor, low.height() * factor, low.channels(), |x, y, c| {
        let u = (x as f64 + 0.5) / f - 0.5;
        let v = (y as f64 + 0.5) / f - 0.5;
        let (ui, vi) = (u.floor(), v.floor());
        let (wx, wy) = (catmull_rom(u - ui), catmull_rom(v - vi));
        let (ui, vi) = (ui as isize, vi as isize);
        let mut acc = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let yy = clamp(vi - 1 + j as isize, h);
            for (i, wxi) in wx.iter().enumerate() {
                let xx = clamp(ui - 1 + i as isize, w);
                acc += wyj * wxi * low.get(xx, yy, c);
            }
        }
        acc
    })
}
