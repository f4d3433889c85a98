//! Splat, convolve and slice on the permutohedral lattice, with the adjoint
//! passes needed for learning the filter.
//!
//! For input features `F_in`, output features `F_out` and filter `B`:
//!
//! ```text
//! x' = S_slice(F_out) * B * S_splat(F_in) * x
//! dL/dx = S_splat^T * B^T * S_slice^T * dL/dx'
//! dL/dB = (S_slice^T dL/dx') (x) (S_splat x), gathered through the neighbourhood
//! ```

mod bank;
mod conv;
mod operators;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

pub use bank::{gaussian_init, FilterBank};
pub use conv::{
    convolve_lattice, convolve_lattice_filter_grad, convolve_lattice_transpose, DEFAULT_CHUNK,
};
pub use operators::{build_blur, build_joint, build_slice, build_splat, BlurNeighborhood, SplatOperator, MISSING};

use crate::error::{Error, Result};
use crate::lattice::LatticeIndex;

/// Point values paired with their feature vectors.
#[derive(Debug, Clone)]
pub struct Signal {
    pub values: Array2<f64>,
    pub features: Array2<f64>,
}

impl Signal {
    pub fn new(values: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        if values.nrows() != features.nrows() {
            return Err(Error::shape(format!(
                "{} values for {} feature vectors",
                values.nrows(),
                features.nrows()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidFeature("feature dimension must be >= 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeature("non-finite feature entry".into()));
        }
        Ok(Signal { values, features })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// How [`LatticeOperators::apply`] post-processes the raw filter response.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterOptions {
    /// Divide by the response to an all-ones signal (scalar banks only).
    pub normalize: bool,
    /// Remove each point's contribution to its own output. Requires
    /// operators built with [`LatticeOperators::symmetric`].
    pub exclude_self: bool,
}

/// Output of [`LatticeOperators::apply`] plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct FilterResponse {
    pub output: Array2<f64>,
    numerator: Array2<f64>,
    denominator: Option<Vec<f64>>,
}

impl FilterResponse {
    pub fn unnormalized(numerator: Array2<f64>) -> Self {
        FilterResponse {
            output: numerator.clone(),
            numerator,
            denominator: None,
        }
    }

    /// Divides each row of `numerator` by its denominator; tiny
    /// denominators give a zero row.
    pub fn normalized(numerator: Array2<f64>, denominator: Vec<f64>) -> Self {
        let mut output = numerator.clone();
        for (mut row, &dv) in output.outer_iter_mut().zip(&denominator) {
            if dv.abs() > MIN_DENOMINATOR {
                row.mapv_inplace(|v| v / dv);
            } else {
                row.fill(0.0);
            }
        }
        FilterResponse {
            output,
            numerator,
            denominator: Some(denominator),
        }
    }

    pub fn denominator(&self) -> Option<&[f64]> {
        self.denominator.as_deref()
    }

    /// Gradient reaching the numerator for an upstream gradient on `output`.
    pub fn numerator_grad(&self, upstream: ArrayView2<f64>) -> Array2<f64> {
        let mut g = upstream.to_owned();
        if let Some(den) = &self.denominator {
            for (mut row, &dv) in g.outer_iter_mut().zip(den) {
                if dv.abs() > MIN_DENOMINATOR {
                    row.mapv_inplace(|v| v / dv);
                } else {
                    row.fill(0.0);
                }
            }
        }
        g
    }

    /// Gradient reaching the denominator, `n x 1`.
    fn denominator_grad(&self, upstream: ArrayView2<f64>) -> Option<Array2<f64>> {
        let den = self.denominator.as_ref()?;
        let mut g_den = Array2::zeros((den.len(), 1));
        for (i, &dv) in den.iter().enumerate() {
            if dv.abs() > MIN_DENOMINATOR {
                g_den[[i, 0]] = -upstream.row(i).dot(&self.numerator.row(i)) / (dv * dv);
            }
        }
        Some(g_den)
    }
}

/// Per-point self-interaction terms: pairs of simplex vertices of the same
/// point, as `(tap, w_a * w_b)`.
#[derive(Debug, Clone)]
struct SelfPairs {
    ptr: Vec<usize>,
    taps: Vec<u32>,
    weights: Vec<f64>,
}

/// Denominators at or below this magnitude produce a zero output.
const MIN_DENOMINATOR: f64 = 1e-12;

/// Splat, slice and neighbourhood operators for one pair of feature sets.
#[derive(Debug, Clone)]
pub struct LatticeOperators {
    pub splat: SplatOperator,
    pub slice: SplatOperator,
    pub blur: BlurNeighborhood,
    pub index: LatticeIndex,
    chunk: usize,
    self_pairs: Option<SelfPairs>,
}

impl LatticeOperators {
    pub fn new(
        features_in: ArrayView2<f64>,
        features_out: ArrayView2<f64>,
        scales: &[f64],
        s: usize,
    ) -> Result<Self> {
        let (splat, index) = build_splat(features_in, scales)?;
        let slice = build_slice(features_out, scales, &index)?;
        let blur = build_blur(&index, s)?;
        Ok(LatticeOperators {
            splat,
            slice,
            blur,
            index,
            chunk: DEFAULT_CHUNK,
            self_pairs: None,
        })
    }

    /// Like [`LatticeOperators::new`], but output simplices are added to the
    /// lattice so no output point loses its vertices.
    pub fn joint(
        features_in: ArrayView2<f64>,
        features_out: ArrayView2<f64>,
        scales: &[f64],
        s: usize,
    ) -> Result<Self> {
        let (splat, slice, index) = build_joint(features_in, features_out, scales)?;
        let blur = build_blur(&index, s)?;
        Ok(LatticeOperators {
            splat,
            slice,
            blur,
            index,
            chunk: DEFAULT_CHUNK,
            self_pairs: None,
        })
    }

    /// Operators for filtering a signal at its own feature locations.
    pub fn symmetric(features: ArrayView2<f64>, scales: &[f64], s: usize) -> Result<Self> {
        let (splat, index) = build_splat(features, scales)?;
        let blur = build_blur(&index, s)?;
        let stencil = blur.stencil();
        let dp1 = stencil.dim() + 1;
        let tap_of: HashMap<&[i32], u32> = (0..stencil.len())
            .map(|k| (stencil.offset(k), k as u32))
            .collect();
        let mut pairs = SelfPairs {
            ptr: vec![0],
            taps: Vec::new(),
            weights: Vec::new(),
        };
        let mut diff = vec![0i32; dp1];
        for (verts, weights) in splat.columns() {
            for (&a, &wa) in verts.iter().zip(weights) {
                for (&b, &wb) in verts.iter().zip(weights) {
                    let w = wa * wb;
                    if w == 0.0 {
                        continue;
                    }
                    for ((dst, &kb), &ka) in diff
                        .iter_mut()
                        .zip(index.key(b as usize))
                        .zip(index.key(a as usize))
                    {
                        *dst = kb - ka;
                    }
                    if let Some(&k) = tap_of.get(diff.as_slice()) {
                        pairs.taps.push(k);
                        pairs.weights.push(w);
                    }
                }
            }
            pairs.ptr.push(pairs.taps.len());
        }
        Ok(LatticeOperators {
            slice: splat.clone(),
            splat,
            blur,
            index,
            chunk: DEFAULT_CHUNK,
            self_pairs: Some(pairs),
        })
    }

    /// Vertices per block in the lattice convolution.
    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn num_inputs(&self) -> usize {
        self.splat.num_points()
    }

    pub fn num_outputs(&self) -> usize {
        self.slice.num_points()
    }

    pub fn num_vertices(&self) -> usize {
        self.index.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.self_pairs.is_some()
    }

    /// `S_slice B S_splat x`.
    pub fn forward(&self, x: ArrayView2<f64>, bank: &FilterBank) -> Result<Array2<f64>> {
        let lattice = self.splat.splat(x)?;
        let blurred = convolve_lattice(lattice.view(), &self.blur, bank, self.chunk)?;
        self.slice.slice(blurred.view())
    }

    /// `S_splat^T B^T S_slice^T upstream`.
    pub fn grad_input(&self, upstream: ArrayView2<f64>, bank: &FilterBank) -> Result<Array2<f64>> {
        let lattice = self.slice.splat(upstream)?;
        let back = convolve_lattice_transpose(lattice.view(), &self.blur, bank, self.chunk)?;
        self.splat.slice(back.view())
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the filter.
    pub fn grad_filter(
        &self,
        upstream: ArrayView2<f64>,
        x: ArrayView2<f64>,
        bank: &FilterBank,
    ) -> Result<FilterBank> {
        let lattice = self.splat.splat(x)?;
        let back = self.slice.splat(upstream)?;
        convolve_lattice_filter_grad(back.view(), lattice.view(), &self.blur, bank)
    }

    fn self_pairs(&self) -> Result<&SelfPairs> {
        self.self_pairs.as_ref().ok_or_else(|| {
            Error::InvalidParameter("self exclusion needs symmetric operators".into())
        })
    }

    /// Each point's contribution to its own filtered output.
    pub fn self_response(&self, x: ArrayView2<f64>, bank: &FilterBank) -> Result<Array2<f64>> {
        let pairs = self.self_pairs()?;
        if x.nrows() != self.num_inputs() {
            return Err(Error::shape("self response: row count mismatch"));
        }
        let c_out = if bank.is_scalar() {
            x.ncols()
        } else if bank.c_in() == x.ncols() {
            bank.c_out()
        } else {
            return Err(Error::shape("self response: channel mismatch"));
        };
        let mut out = Array2::zeros((x.nrows(), c_out));
        for (i, (xi, mut oi)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            for p in pairs.ptr[i]..pairs.ptr[i + 1] {
                let (k, w) = (pairs.taps[p] as usize, pairs.weights[p]);
                if bank.is_scalar() {
                    oi.scaled_add(w * bank.get(0, 0, k), &xi);
                } else {
                    for co in 0..c_out {
                        let dot: f64 = (0..xi.len()).map(|ci| bank.get(co, ci, k) * xi[ci]).sum();
                        oi[co] += w * dot;
                    }
                }
            }
        }
        Ok(out)
    }

    fn self_response_backward(
        &self,
        upstream: ArrayView2<f64>,
        x: ArrayView2<f64>,
        bank: &FilterBank,
        grad_x: &mut Array2<f64>,
        grad_bank: &mut FilterBank,
        sign: f64,
    ) -> Result<()> {
        let pairs = self.self_pairs()?;
        for i in 0..x.nrows() {
            let (xi, gi) = (x.row(i), upstream.row(i));
            for p in pairs.ptr[i]..pairs.ptr[i + 1] {
                let (k, w) = (pairs.taps[p] as usize, pairs.weights[p] * sign);
                if bank.is_scalar() {
                    let b = bank.get(0, 0, k);
                    let mut gx = grad_x.row_mut(i);
                    gx.scaled_add(w * b, &gi);
                    *grad_bank.get_mut(0, 0, k) += w * gi.dot(&xi);
                } else {
                    for co in 0..bank.c_out() {
                        for ci in 0..bank.c_in() {
                            grad_x[[i, ci]] += w * bank.get(co, ci, k) * gi[co];
                            *grad_bank.get_mut(co, ci, k) += w * gi[co] * xi[ci];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Filter response with optional self exclusion and normalisation.
    pub fn apply(
        &self,
        x: ArrayView2<f64>,
        bank: &FilterBank,
        opts: FilterOptions,
    ) -> Result<FilterResponse> {
        let mut numerator = self.forward(x, bank)?;
        if opts.exclude_self {
            numerator -= &self.self_response(x, bank)?;
        }
        if !opts.normalize {
            return Ok(FilterResponse::unnormalized(numerator));
        }
        if !bank.is_scalar() {
            return Err(Error::InvalidParameter(
                "normalisation needs a scalar filter bank".into(),
            ));
        }
        let ones = Array2::ones((x.nrows(), 1));
        let mut den = self.forward(ones.view(), bank)?;
        if opts.exclude_self {
            den -= &self.self_response(ones.view(), bank)?;
        }
        Ok(FilterResponse::normalized(numerator, den.column(0).to_vec()))
    }

    /// Gradients of `<upstream, apply(x).output>` for `x` and the filter.
    pub fn apply_backward(
        &self,
        x: ArrayView2<f64>,
        bank: &FilterBank,
        opts: FilterOptions,
        response: &FilterResponse,
        upstream: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, FilterBank)> {
        if upstream.dim() != response.output.dim() {
            return Err(Error::shape("upstream does not match filter output"));
        }
        let g_num = response.numerator_grad(upstream);
        let g_den = response.denominator_grad(upstream);
        let mut grad_x = self.grad_input(g_num.view(), bank)?;
        let mut grad_bank = self.grad_filter(g_num.view(), x, bank)?;
        if opts.exclude_self {
            self.self_response_backward(g_num.view(), x, bank, &mut grad_x, &mut grad_bank, -1.0)?;
        }
        if let Some(g_den) = g_den {
            let ones = Array2::ones((x.nrows(), 1));
            grad_bank.axpy(1.0, &self.grad_filter(g_den.view(), ones.view(), bank)?)?;
            if opts.exclude_self {
                let mut scratch = Array2::zeros((x.nrows(), 1));
                self.self_response_backward(
                    g_den.view(),
                    ones.view(),
                    bank,
                    &mut scratch,
                    &mut grad_bank,
                    -1.0,
                )?;
            }
        }
        Ok((grad_x, grad_bank))
    }
}

/// Filters `x` from its own features to `features_out`.
pub fn forward(
    x: &Signal,
    features_out: ArrayView2<f64>,
    scales: &[f64],
    bank: &FilterBank,
) -> Result<Array2<f64>> {
    let ops = LatticeOperators::new(x.features.view(), features_out, scales, bank.hops())?;
    ops.forward(x.values.view(), bank)
}

/// Gradient of a loss with respect to the input values.
pub fn grad_input(
    upstream: ArrayView2<f64>,
    ops: &LatticeOperators,
    bank: &FilterBank,
) -> Result<Array2<f64>> {
    ops.grad_input(upstream, bank)
}

/// Gradient of a loss with respect to the filter weights.
pub fn grad_filter(
    upstream: ArrayView2<f64>,
    x: ArrayView2<f64>,
    ops: &LatticeOperators,
    bank: &FilterBank,
) -> Result<FilterBank> {
    ops.grad_filter(upstream, x, bank)
}

/// Splat followed directly by slice, normalised by the splatted mass so each
/// output is a convex combination of inputs. Outputs with no populated vertex
/// are 0.
pub fn bnn_identity(
    x: ArrayView2<f64>,
    features_in: ArrayView2<f64>,
    features_out: ArrayView2<f64>,
    scales: &[f64],
) -> Result<Array2<f64>> {
    let ops = LatticeOperators::new(features_in, features_out, scales, 0)?;
    let bank = FilterBank::center_identity(features_in.ncols(), 0, 1)?;
    let opts = FilterOptions {
        normalize: true,
        exclude_self: false,
    };
    Ok(ops.apply(x, &bank, opts)?.output)
}

/// Sum of slice weights per output point; 1 when every vertex is populated.
pub fn slice_coverage(slice: &SplatOperator) -> Vec<f64> {
    slice.columns().map(|(_, w)| w.iter().sum()).collect()
}
