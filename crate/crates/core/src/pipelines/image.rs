//! Unit-range raster images and their file formats.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput("image has no pixels"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    /// `n x c` pixel matrix (row `y * width + x`), clamped into range.
    pub fn from_pixels(width: usize, height: usize, pixels: ArrayView2<f64>) -> Result<Self> {
        if pixels.nrows() != width * height {
            return Err(Error::shape(format!(
                "{} rows for a {width}x{height} image",
                pixels.nrows()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite pixel value".into()));
        }
        let data = pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(width, height, pixels.ncols(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixels(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), self.channels), self.data.clone())
            .expect("length checked at construction")
    }

    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(3)
            .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Reads PNG or PNM; colour images become RGB, everything else gray.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let data = img.to_rgb8().into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Self::new(w, h, 3, data)
        } else {
            let data = img.to_luma8().into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Self::new(w, h, 1, data)
        }
        .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    /// Writes 8-bit PNG, or ASCII PGM/PPM for `.pgm`, `.ppm` and `.pnm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        let color = if self.channels == 3 {
            ExtendedColorType::Rgb8
        } else {
            ExtendedColorType::L8
        };
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_bytes();
        match ext.as_str() {
            "png" => image::save_buffer(path, &bytes, w, h, color)?,
            "pgm" | "ppm" | "pnm" => {
                let subtype = if self.channels == 3 {
                    PnmSubtype::Pixmap(SampleEncoding::Ascii)
                } else {
                    PnmSubtype::Graymap(SampleEncoding::Ascii)
                };
                let out = BufWriter::new(File::create(path)?);
                PnmEncoder::new(out)
                    .with_subtype(subtype)
                    .write_image(&bytes, w, h, color)?;
            }
            _ => {
                return Err(Error::format(path, "unknown image extension (png, pgm, ppm, pnm)"));
            }
        }
        Ok(())
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// Reported in place of infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` over the full frame, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_and_gray() {
        assert!(ImageBuffer::new(2, 1, 2, vec![0.0; 4]).is_err());
        assert!(ImageBuffer::new(2, 1, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![1.5]).is_err());
        let rgb = ImageBuffer::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((rgb.to_gray().get(0, 0, 0) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageBuffer::new(2, 2, 1, vec![0.5; 4]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = ImageBuffer::new(2, 2, 1, vec![0.6; 4]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = ImageBuffer::new(4, 1, 1, vec![0.5; 4]).unwrap();
        assert!(psnr(&a, &c).is_err());
    }
}
