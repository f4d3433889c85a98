//! Explicit Gaussian gram-matrix bilateral filtering.
//!
//! For input features `f_j` (P rows) and output features `g_i` (Q rows) the
//! kernel is the row-normalised Gaussian
//!
//! ```text
//! K_ij = exp(-theta * |L (g_i - f_j)|^2) / sum_j' exp(-theta * |L (g_i - f_j')|^2)
//! ```
//!
//! An inception module combines `H` such kernels with per-channel weights and
//! learns the weights, every `theta` and the shared feature transform `L`.

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Row-stochastic `Q x P` Gaussian kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GramKernel {
    pub k: Array2<f64>,
    pub theta: f64,
}

impl GramKernel {
    pub fn num_outputs(&self) -> usize {
        self.k.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.k.ncols()
    }
}

fn check_features(
    f_in: ArrayView2<f64>,
    f_out: ArrayView2<f64>,
    lambda: ArrayView2<f64>,
) -> Result<()> {
    if f_in.nrows() == 0 {
        return Err(Error::EmptyInput("gram kernel needs at least one input point"));
    }
    let d = f_in.ncols();
    if f_out.ncols() != d || lambda.ncols() != d {
        return Err(Error::shape(format!(
            "feature dims: in {d}, out {}, transform expects {}",
            f_out.ncols(),
            lambda.ncols()
        )));
    }
    if f_in.iter().chain(f_out.iter()).chain(lambda.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidFeature("non-finite feature or transform entry".into()));
    }
    Ok(())
}

/// `D_ij = |L (g_i - f_j)|^2`, `Q x P`.
pub fn pairwise_sq_dist(
    f_in: ArrayView2<f64>,
    f_out: ArrayView2<f64>,
    lambda: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_features(f_in, f_out, lambda)?;
    let a = f_in.dot(&lambda.t());
    let b = f_out.dot(&lambda.t());
    let mut dist = Array2::zeros((f_out.nrows(), f_in.nrows()));
    dist.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let bi = b.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = bi.iter().zip(a.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        });
    Ok(dist)
}

/// Unnormalised affinities `exp(-theta * D)`.
pub fn gaussian_affinity(
    f_in: ArrayView2<f64>,
    f_out: ArrayView2<f64>,
    lambda: ArrayView2<f64>,
    theta: f64,
) -> Result<Array2<f64>> {
    check_theta(theta)?;
    Ok(pairwise_sq_dist(f_in, f_out, lambda)?.mapv(|d| (-theta * d).exp()))
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::InvalidParameter(format!("theta must be positive, got {theta}")));
    }
    Ok(())
}

/// Row softmax of `-theta * dist`, shifted by the row minimum for range.
fn normalized_kernel(dist: &Array2<f64>, theta: f64) -> Array2<f64> {
    let mut k = dist.clone();
    k.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.mapv_inplace(|d| (-theta * (d - min)).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    });
    k
}

pub fn build_gram(
    f_in: ArrayView2<f64>,
    f_out: ArrayView2<f64>,
    lambda: ArrayView2<f64>,
    theta: f64,
) -> Result<GramKernel> {
    check_theta(theta)?;
    let dist = pairwise_sq_dist(f_in, f_out, lambda)?;
    Ok(GramKernel {
        k: normalized_kernel(&dist, theta),
        theta,
    })
}

pub fn gram_apply(kernel: &GramKernel, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    if z.nrows() != kernel.num_inputs() {
        return Err(Error::shape(format!(
            "kernel takes {} points, got {}",
            kernel.num_inputs(),
            z.nrows()
        )));
    }
    Ok(kernel.k.dot(&z))
}

/// `sum_h w[h][c] * (K_h z)_c`.
pub fn inception_forward(
    z: ArrayView2<f64>,
    kernels: &[GramKernel],
    w: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let first = kernels
        .first()
        .ok_or(Error::EmptyInput("inception needs at least one scale"))?;
    if w.dim() != (kernels.len(), z.ncols()) {
        return Err(Error::shape(format!(
            "weights must be {}x{}, got {:?}",
            kernels.len(),
            z.ncols(),
            w.dim()
        )));
    }
    if kernels.iter().any(|k| k.k.dim() != first.k.dim()) {
        return Err(Error::shape("kernels must share P and Q"));
    }
    let mut out = Array2::zeros((first.num_outputs(), z.ncols()));
    for (kernel, wh) in kernels.iter().zip(w.outer_iter()) {
        out += &(gram_apply(kernel, z)? * &wh);
    }
    Ok(out)
}

/// `{1, 0.7, 0.3}`, then dividing by three per extra scale.
pub fn default_thetas(h: usize) -> Vec<f64> {
    let mut t = vec![1.0, 0.7, 0.3];
    while t.len() < h {
        let last = *t.last().expect("non-empty");
        t.push(last / 3.0);
    }
    t.truncate(h);
    t
}

#[derive(Debug, Clone)]
struct InceptionCache {
    f_in: Array2<f64>,
    f_out: Array2<f64>,
    dist: Array2<f64>,
    kernels: Vec<Array2<f64>>,
    z: Array2<f64>,
    z_hat: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionGrads {
    pub z: Array2<f64>,
    pub w: Array2<f64>,
    pub theta: Vec<f64>,
    pub lambda: Array2<f64>,
}

/// Multi-scale explicit bilateral layer with learnable `w`, `theta`, `L`.
#[derive(Debug, Clone)]
pub struct InceptionModule {
    pub lambda: Array2<f64>,
    pub thetas: Vec<f64>,
    /// `H x C` combination weights.
    pub w: Array2<f64>,
    cache: Option<InceptionCache>,
}

impl InceptionModule {
    pub fn new(lambda: Array2<f64>, thetas: Vec<f64>, w: Array2<f64>) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::EmptyInput("inception needs at least one scale"));
        }
        if w.nrows() != thetas.len() {
            return Err(Error::shape("weights need one row per scale"));
        }
        for &t in &thetas {
            check_theta(t)?;
        }
        if lambda.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite module parameter".into()));
        }
        Ok(InceptionModule {
            lambda,
            thetas,
            w,
            cache: None,
        })
    }

    /// `L = diag(scales)`, default thetas, uniform `w = 1/H`.
    pub fn with_defaults(scales: &[f64], h: usize, channels: usize) -> Result<Self> {
        let lambda = Array2::from_diag(&Array1::from(scales.to_vec()));
        let w = Array2::from_elem((h, channels), 1.0 / h as f64);
        Self::new(lambda, default_thetas(h), w)
    }

    pub fn num_scales(&self) -> usize {
        self.thetas.len()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Kernels for the current parameters (no caching).
    pub fn kernels(&self, f_in: ArrayView2<f64>, f_out: ArrayView2<f64>) -> Result<Vec<GramKernel>> {
        let dist = pairwise_sq_dist(f_in, f_out, self.lambda.view())?;
        Ok(self
            .thetas
            .iter()
            .map(|&theta| GramKernel {
                k: normalized_kernel(&dist, theta),
                theta,
            })
            .collect())
    }

    pub fn forward(
        &mut self,
        z: ArrayView2<f64>,
        f_in: ArrayView2<f64>,
        f_out: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.cache = None;
        if z.nrows() != f_in.nrows() {
            return Err(Error::shape("values and input features disagree on P"));
        }
        if z.ncols() != self.w.ncols() {
            return Err(Error::shape(format!(
                "module has {} channels, values have {}",
                self.w.ncols(),
                z.ncols()
            )));
        }
        // One distance matrix serves every scale.
        let dist = pairwise_sq_dist(f_in, f_out, self.lambda.view())?;
        let kernels: Vec<Array2<f64>> = self
            .thetas
            .iter()
            .map(|&t| normalized_kernel(&dist, t))
            .collect();
        let z_hat: Vec<Array2<f64>> = kernels.iter().map(|k| k.dot(&z)).collect();
        let mut out = Array2::zeros((f_out.nrows(), z.ncols()));
        for (zh, wh) in z_hat.iter().zip(self.w.outer_iter()) {
            out += &(zh * &wh);
        }
        self.cache = Some(InceptionCache {
            f_in: f_in.to_owned(),
            f_out: f_out.to_owned(),
            dist,
            kernels,
            z: z.to_owned(),
            z_hat,
        });
        Ok(out)
    }

    pub fn backward(&self, upstream: ArrayView2<f64>) -> Result<InceptionGrads> {
        let cache = self.cache.as_ref().ok_or(Error::CacheMissing)?;
        let (q, c) = (cache.f_out.nrows(), cache.z.ncols());
        if upstream.dim() != (q, c) {
            return Err(Error::shape("upstream does not match the module output"));
        }
        let h = self.thetas.len();
        let mut g_w = Array2::zeros((h, c));
        let mut g_z = Array2::zeros(cache.z.dim());
        let mut g_theta = vec![0.0; h];
        let mut g_dist = Array2::<f64>::zeros(cache.dist.dim());
        for s in 0..h {
            let k = &cache.kernels[s];
            g_w.row_mut(s)
                .assign(&(&upstream * &cache.z_hat[s]).sum_axis(Axis(0)));
            let g_hat = &upstream * &self.w.row(s);
            g_z += &k.t().dot(&g_hat);
            // dL/dK, then back through the row softmax.
            let g_k = g_hat.dot(&cache.z.t());
            let kg = k * &g_k;
            let row_dot = kg.sum_axis(Axis(1)).insert_axis(Axis(1));
            let g_logits = k * &(&g_k - &row_dot);
            g_theta[s] = -(&g_logits * &cache.dist).sum();
            g_dist.scaled_add(-self.thetas[s], &g_logits);
        }
        // D_ij = |L d_ij|^2  =>  dL = 2 L sum_ij gD_ij d_ij d_ij^T
        let dim = cache.f_in.ncols();
        let mut outer = Array2::<f64>::zeros((dim, dim));
        let mut delta = vec![0.0; dim];
        for i in 0..q {
            let fo = cache.f_out.row(i);
            for (j, fi) in cache.f_in.outer_iter().enumerate() {
                let g = g_dist[[i, j]];
                if g == 0.0 {
                    continue;
                }
                for (dv, (a, b)) in delta.iter_mut().zip(fo.iter().zip(fi.iter())) {
                    *dv = a - b;
                }
                for a in 0..dim {
                    let ga = g * delta[a];
                    for b in 0..dim {
                        outer[[a, b]] += ga * delta[b];
                    }
                }
            }
        }
        let g_lambda = self.lambda.dot(&outer) * 2.0;
        Ok(InceptionGrads {
            z: g_z,
            w: g_w,
            theta: g_theta,
            lambda: g_lambda,
        })
    }
}

/// Per-segment means of `values` and `features`; segment ids must cover
/// `0..M` without gaps.
pub fn superpixel_reduce(
    values: ArrayView2<f64>,
    features: ArrayView2<f64>,
    segments: &[usize],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = segments.len();
    if values.nrows() != n || features.nrows() != n {
        return Err(Error::shape(format!(
            "segment map has {n} entries, values {} and features {}",
            values.nrows(),
            features.nrows()
        )));
    }
    let m = match segments.iter().max() {
        Some(&max) => max + 1,
        None => return Err(Error::EmptyInput("empty segment map")),
    };
    let mut counts = vec![0usize; m];
    let mut v = Array2::zeros((m, values.ncols()));
    let mut f = Array2::zeros((m, features.ncols()));
    for (i, &s) in segments.iter().enumerate() {
        counts[s] += 1;
        let mut vr = v.row_mut(s);
        vr += &values.row(i);
        let mut fr = f.row_mut(s);
        fr += &features.row(i);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptySegment(empty));
    }
    for (s, &cnt) in counts.iter().enumerate() {
        let inv = 1.0 / cnt as f64;
        v.row_mut(s).mapv_inplace(|x| x * inv);
        f.row_mut(s).mapv_inplace(|x| x * inv);
    }
    Ok((v, f))
}

/// Copies each segment's row back to its member points.
pub fn superpixel_expand(means: ArrayView2<f64>, segments: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = segments.iter().find(|&&s| s >= means.nrows()) {
        return Err(Error::shape(format!(
            "segment {bad} out of range for {} means",
            means.nrows()
        )));
    }
    let mut out = Array2::zeros((segments.len(), means.ncols()));
    for (mut row, &s) in out.outer_iter_mut().zip(segments) {
        row.assign(&means.row(s));
    }
    Ok(out)
}
