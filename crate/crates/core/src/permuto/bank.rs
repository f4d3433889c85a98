use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lattice::{filter_size, Stencil};

const MAGIC: &[u8; 4] = b"PBF1";

/// Learnable lattice filter, `c_out x c_in x t` taps in canonical stencil order.
///
/// A `1 x 1` bank applied to a multi-channel signal filters every channel
/// independently with the same taps.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    d: usize,
    s: usize,
    c_out: usize,
    c_in: usize,
    t: usize,
    weights: Vec<f64>,
}

impl FilterBank {
    pub fn zeros(d: usize, s: usize, c_out: usize, c_in: usize) -> Result<Self> {
        if d == 0 || c_out == 0 || c_in == 0 {
            return Err(Error::shape("filter bank needs d, c_out, c_in >= 1"));
        }
        let t = filter_size(d, s)?;
        let len = t
            .checked_mul(c_out)
            .and_then(|v| v.checked_mul(c_in))
            .ok_or(Error::SizeOverflow { d, s })?;
        Ok(FilterBank {
            d,
            s,
            c_out,
            c_in,
            t,
            weights: vec![0.0; len],
        })
    }

    pub fn from_weights(
        d: usize,
        s: usize,
        c_out: usize,
        c_in: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let mut bank = Self::zeros(d, s, c_out, c_in)?;
        if weights.len() != bank.weights.len() {
            return Err(Error::shape(format!(
                "expected {} weights, got {}",
                bank.weights.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("filter weights must be finite".into()));
        }
        bank.weights = weights;
        Ok(bank)
    }

    /// Centre tap 1 on the channel diagonal, everything else 0.
    pub fn center_identity(d: usize, s: usize, channels: usize) -> Result<Self> {
        let mut bank = Self::zeros(d, s, channels, channels)?;
        for c in 0..channels {
            *bank.get_mut(c, c, 0) = 1.0;
        }
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hops(&self) -> usize {
        self.s
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    /// Taps per channel pair.
    pub fn taps(&self) -> usize {
        self.t
    }

    pub fn is_scalar(&self) -> bool {
        self.c_out == 1 && self.c_in == 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn taps_of(&self, c_out: usize, c_in: usize) -> &[f64] {
        let start = (c_out * self.c_in + c_in) * self.t;
        &self.weights[start..start + self.t]
    }

    pub fn get(&self, c_out: usize, c_in: usize, k: usize) -> f64 {
        self.weights[(c_out * self.c_in + c_in) * self.t + k]
    }

    pub fn get_mut(&mut self, c_out: usize, c_in: usize, k: usize) -> &mut f64 {
        &mut self.weights[(c_out * self.c_in + c_in) * self.t + k]
    }

    /// Zero bank of the same shape.
    pub fn zeros_like(&self) -> Self {
        FilterBank {
            weights: vec![0.0; self.weights.len()],
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &FilterBank) -> bool {
        self.d == other.d
            && self.s == other.s
            && self.c_out == other.c_out
            && self.c_in == other.c_in
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.iter_mut().for_each(|w| *w *= alpha);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &FilterBank) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("filter banks differ in shape"));
        }
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += alpha * o;
        }
        Ok(())
    }

    /// Serialises as `PBF1`: magic, then `d, s, c_out, c_in` as little-endian
    /// `u32`, then the weights as little-endian `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.d, self.s, self.c_out, self.c_in] {
            let v = u32::try_from(v)
                .map_err(|_| Error::InvalidParameter(format!("{v} does not fit in u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for &x in &self.weights {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::format("<PBF1 stream>", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic, expected PBF1"));
        }
        let mut header = [0usize; 4];
        for h in header.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            *h = u32::from_le_bytes(buf) as usize;
        }
        let [d, s, c_out, c_in] = header;
        let mut bank = Self::zeros(d, s, c_out, c_in)?;
        let mut buf = vec![0u8; bank.weights.len() * 4];
        r.read_exact(&mut buf)?;
        for (w, b) in bank.weights.iter_mut().zip(buf.chunks_exact(4)) {
            *w = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after weights"));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_from(BufReader::new(File::open(path)?)).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}

/// Scalar Gaussian filter over the stencil, `exp(-|offset|^2 / (2 sigma^2))`
/// with offsets measured in lattice hops, normalised to sum 1.
pub fn gaussian_init(d: usize, s: usize, sigma: f64) -> Result<FilterBank> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    let stencil = Stencil::new(d, s)?;
    let mut logits: Vec<f64> = (0..stencil.len())
        .map(|k| -stencil.offset_norm_sq(k) / (2.0 * sigma * sigma))
        .collect();
    // Centre logit is 0 and the maximum; exponentiate relative to it.
    let total: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter_mut().for_each(|l| *l = l.exp() / total);
    FilterBank::from_weights(d, s, 1, 1, logits)
}
