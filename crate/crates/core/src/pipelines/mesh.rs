//! Point-cloud signals over precomputed embedding features.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::permuto::{FilterBank, FilterOptions, LatticeOperators};

/// Per-point values (e.g. displacement vectors) with aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSignal {
    pub values: Array2<f64>,
    pub features: Array2<f64>,
}

impl PointCloudSignal {
    pub fn new(values: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        if values.nrows() != features.nrows() {
            return Err(Error::shape(format!(
                "{} value rows vs {} feature rows",
                values.nrows(),
                features.nrows()
            )));
        }
        if values.iter().chain(features.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeature("non-finite point cloud entry".into()));
        }
        Ok(PointCloudSignal { values, features })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with a header naming `value_k` and `feat_k` columns in any order.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("<csv>", reason);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut value_cols = Vec::new();
        let mut feat_cols = Vec::new();
        for (col, name) in header.split(',').map(str::trim).enumerate() {
            let (target, idx) = if let Some(k) = name.strip_prefix("value_") {
                (&mut value_cols, k)
            } else if let Some(k) = name.strip_prefix("feat_") {
                (&mut feat_cols, k)
            } else {
                return Err(bad(format!("unexpected column '{name}'")));
            };
            let idx: usize = idx.parse().map_err(|_| bad(format!("bad column '{name}'")))?;
            target.push((idx, col));
        }
        for cols in [&mut value_cols, &mut feat_cols] {
            cols.sort_unstable();
            if cols.iter().enumerate().any(|(i, &(k, _))| i != k) {
                return Err(bad("column indices must run 0..k without gaps".into()));
            }
        }
        if feat_cols.is_empty() {
            return Err(bad("no feat_ columns".into()));
        }
        let width = value_cols.len() + feat_cols.len();
        let mut values = Vec::new();
        let mut feats = Vec::new();
        let mut rows = 0;
        for (n, line) in lines.enumerate() {
            let cells: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("row {}: not a number", n + 1)))?;
            if cells.len() != width {
                return Err(bad(format!("row {}: {} cells, expected {width}", n + 1, cells.len())));
            }
            values.extend(value_cols.iter().map(|&(_, c)| cells[c]));
            feats.extend(feat_cols.iter().map(|&(_, c)| cells[c]));
            rows += 1;
        }
        let values = Array2::from_shape_vec((rows, value_cols.len()), values)
            .map_err(|e| bad(e.to_string()))?;
        let features = Array2::from_shape_vec((rows, feat_cols.len()), feats)
            .map_err(|e| bad(e.to_string()))?;
        Self::new(values, features)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<String> = (0..self.values.ncols())
            .map(|k| format!("value_{k}"))
            .chain((0..self.features.ncols()).map(|k| format!("feat_{k}")))
            .collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for (v, f) in self.values.outer_iter().zip(self.features.outer_iter()) {
            let cells: Vec<String> = v.iter().chain(f.iter()).map(|x| format!("{x}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Filters the values over the scaled features and slices back at the
/// same points.
pub fn mesh_denoise(
    noisy: &PointCloudSignal,
    bank: &FilterBank,
    scales: &[f64],
    normalize: bool,
) -> Result<Array2<f64>> {
    let ops = LatticeOperators::new(noisy.features.view(), noisy.features.view(), scales, bank.hops())?;
    let opts = FilterOptions {
        normalize,
        exclude_self: false,
    };
    Ok(ops.apply(noisy.values.view(), bank, opts)?.output)
}

/// Root mean squared per-point Euclidean distance.
pub fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.nrows() as f64).sqrt())
}
