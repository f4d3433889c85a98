//! Fully connected CRF mean-field inference.
//!
//! One update is
//!
//! ```text
//! Q'_i(l) = softmax_l( -U_i(l) - sum_l' mu(l, l') * sum_m w_m * [k_m * Q(l')]_i )
//! ```
//!
//! where each pairwise kernel `k_m` is applied as a filter over the label
//! marginals, either through the permutohedral lattice or as an explicit
//! dense affinity matrix.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::permuto::{gaussian_init, FilterBank, FilterOptions, FilterResponse, LatticeOperators};
use crate::training::softmax_rows;

/// Negative log unary potentials, `n x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Unaries(Array2<f64>);

impl Unaries {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::EmptyInput("unaries need n >= 1 points and L >= 1 labels"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("unaries must be finite".into()));
        }
        Ok(Unaries(values))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn num_points(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.0.ncols()
    }
}

/// Label marginals `Q`, rows on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalState {
    pub q: Array2<f64>,
}

impl MarginalState {
    /// Most probable label per point.
    pub fn labels(&self) -> Vec<usize> {
        self.q
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (l, &v)| {
                        if v > best.1 {
                            (l, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// How a pairwise kernel filters the marginals.
#[derive(Debug, Clone)]
pub enum KernelFilter {
    /// Permutohedral filtering with a (learnable) filter bank.
    Lattice {
        ops: Arc<LatticeOperators>,
        bank: FilterBank,
    },
    /// Explicit `n x n` affinities, row `i` weighting every point `j`.
    Dense(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct PairwiseKernel {
    pub filter: KernelFilter,
    pub weight: f64,
    /// Divide each message by the kernel's response to an all-ones signal.
    pub normalize: bool,
}

impl PairwiseKernel {
    pub fn lattice(
        features: ArrayView2<f64>,
        scales: &[f64],
        bank: FilterBank,
        weight: f64,
    ) -> Result<Self> {
        let ops = LatticeOperators::symmetric(features, scales, bank.hops())?;
        Ok(PairwiseKernel {
            filter: KernelFilter::Lattice {
                ops: Arc::new(ops),
                bank,
            },
            weight,
            normalize: false,
        })
    }

    /// Lattice kernel initialised with a Gaussian of `sigma` lattice hops.
    pub fn gaussian(
        features: ArrayView2<f64>,
        scales: &[f64],
        s: usize,
        sigma: f64,
        weight: f64,
    ) -> Result<Self> {
        let bank = gaussian_init(features.ncols(), s, sigma)?;
        Self::lattice(features, scales, bank, weight)
    }

    pub fn dense(affinity: Array2<f64>, weight: f64) -> Result<Self> {
        if affinity.nrows() != affinity.ncols() {
            return Err(Error::shape("dense affinity must be square"));
        }
        Ok(PairwiseKernel {
            filter: KernelFilter::Dense(affinity),
            weight,
            normalize: false,
        })
    }

    pub fn with_normalization(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn num_points(&self) -> usize {
        match &self.filter {
            KernelFilter::Lattice { ops, .. } => ops.num_inputs(),
            KernelFilter::Dense(a) => a.nrows(),
        }
    }

    pub fn bank(&self) -> Option<&FilterBank> {
        match &self.filter {
            KernelFilter::Lattice { bank, .. } => Some(bank),
            KernelFilter::Dense(_) => None,
        }
    }

    pub fn bank_mut(&mut self) -> Option<&mut FilterBank> {
        match &mut self.filter {
            KernelFilter::Lattice { bank, .. } => Some(bank),
            KernelFilter::Dense(_) => None,
        }
    }

    fn message(&self, q: ArrayView2<f64>, exclude_self: bool) -> Result<FilterResponse> {
        let opts = FilterOptions {
            normalize: self.normalize,
            exclude_self,
        };
        match &self.filter {
            KernelFilter::Lattice { ops, bank } => ops.apply(q, bank, opts),
            KernelFilter::Dense(a) => Ok(dense_apply(a, q, opts)),
        }
    }

    fn message_backward(
        &self,
        q: ArrayView2<f64>,
        exclude_self: bool,
        response: &FilterResponse,
        upstream: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Option<FilterBank>)> {
        let opts = FilterOptions {
            normalize: self.normalize,
            exclude_self,
        };
        match &self.filter {
            KernelFilter::Lattice { ops, bank } => {
                let (gq, gb) = ops.apply_backward(q, bank, opts, response, upstream)?;
                Ok((gq, Some(gb)))
            }
            KernelFilter::Dense(a) => Ok((dense_backward(a, opts, response, upstream), None)),
        }
    }
}

fn dense_effective(a: &Array2<f64>, exclude_self: bool) -> Array2<f64> {
    let mut a = a.clone();
    if exclude_self {
        a.diag_mut().fill(0.0);
    }
    a
}

fn dense_apply(a: &Array2<f64>, q: ArrayView2<f64>, opts: FilterOptions) -> FilterResponse {
    let a = dense_effective(a, opts.exclude_self);
    let numerator = a.dot(&q);
    if !opts.normalize {
        return FilterResponse::unnormalized(numerator);
    }
    let den: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    FilterResponse::normalized(numerator, den)
}

fn dense_backward(
    a: &Array2<f64>,
    opts: FilterOptions,
    response: &FilterResponse,
    upstream: ArrayView2<f64>,
) -> Array2<f64> {
    let a = dense_effective(a, opts.exclude_self);
    let g_num = response.numerator_grad(upstream);
    a.t().dot(&g_num)
}

/// Potts compatibility `mu(l, l') = [l != l']`.
pub fn potts(num_labels: usize) -> Array2<f64> {
    Array2::from_shape_fn((num_labels, num_labels), |(a, b)| if a == b { 0.0 } else { 1.0 })
}

/// `Q = softmax(-U)` row-wise.
pub fn mf_init(unaries: &Unaries) -> MarginalState {
    MarginalState {
        q: softmax_rows((-&unaries.0).view()),
    }
}

fn check_step(
    q: &MarginalState,
    unaries: &Unaries,
    kernels: &[PairwiseKernel],
    compat: ArrayView2<f64>,
) -> Result<()> {
    let (n, l) = unaries.0.dim();
    if q.q.dim() != (n, l) {
        return Err(Error::shape(format!("Q is {:?}, unaries are {:?}", q.q.dim(), (n, l))));
    }
    if compat.dim() != (l, l) {
        return Err(Error::shape(format!("compatibility must be {l}x{l}")));
    }
    if let Some(k) = kernels.iter().find(|k| k.num_points() != n) {
        return Err(Error::shape(format!(
            "kernel covers {} points, unaries have {n}",
            k.num_points()
        )));
    }
    Ok(())
}

/// Cached quantities of one update, for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    responses: Vec<FilterResponse>,
}

fn step_cached(
    q: &MarginalState,
    unaries: &Unaries,
    kernels: &[PairwiseKernel],
    compat: ArrayView2<f64>,
    exclude_self: bool,
) -> Result<(MarginalState, StepCache)> {
    check_step(q, unaries, kernels, compat)?;
    let mut message = Array2::zeros(q.q.dim());
    let mut responses = Vec::with_capacity(kernels.len());
    for kernel in kernels {
        let resp = kernel.message(q.q.view(), exclude_self)?;
        if kernel.weight != 0.0 {
            message.scaled_add(kernel.weight, &resp.output);
        }
        responses.push(resp);
    }
    // E_i(l) = sum_l' mu(l, l') M_i(l')
    let energy = message.dot(&compat.t());
    let logits = -&unaries.0 - &energy;
    Ok((
        MarginalState {
            q: softmax_rows(logits.view()),
        },
        StepCache { responses },
    ))
}

/// One mean-field update.
pub fn mf_step(
    q: &MarginalState,
    unaries: &Unaries,
    kernels: &[PairwiseKernel],
    compat: ArrayView2<f64>,
    exclude_self: bool,
) -> Result<MarginalState> {
    Ok(step_cached(q, unaries, kernels, compat, exclude_self)?.0)
}

/// Kernels used at each mean-field step.
#[derive(Debug, Clone)]
pub enum KernelSchedule {
    /// Same kernels every step.
    Shared(Vec<PairwiseKernel>),
    /// Distinct kernels per step ("loose" mean-field).
    Loose(Vec<Vec<PairwiseKernel>>),
}

impl KernelSchedule {
    pub fn at(&self, step: usize) -> Result<&[PairwiseKernel]> {
        match self {
            KernelSchedule::Shared(k) => Ok(k),
            KernelSchedule::Loose(sets) => sets
                .get(step)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::InvalidParameter(format!("no kernel set for step {step}"))),
        }
    }

    /// Number of independent kernel sets.
    pub fn sets(&self) -> usize {
        match self {
            KernelSchedule::Shared(_) => 1,
            KernelSchedule::Loose(sets) => sets.len(),
        }
    }

    fn set_index(&self, step: usize) -> usize {
        match self {
            KernelSchedule::Shared(_) => 0,
            KernelSchedule::Loose(_) => step,
        }
    }

    pub fn set(&self, index: usize) -> &[PairwiseKernel] {
        match self {
            KernelSchedule::Shared(k) => k,
            KernelSchedule::Loose(sets) => &sets[index],
        }
    }

    pub fn set_mut(&mut self, index: usize) -> &mut [PairwiseKernel] {
        match self {
            KernelSchedule::Shared(k) => k,
            KernelSchedule::Loose(sets) => &mut sets[index],
        }
    }
}

/// Mean-field model: compatibility, kernels and self-interaction handling.
#[derive(Debug, Clone)]
pub struct CrfModel {
    pub compat: Array2<f64>,
    pub kernels: KernelSchedule,
    pub exclude_self: bool,
}

impl CrfModel {
    pub fn potts(num_labels: usize, kernels: KernelSchedule) -> Self {
        CrfModel {
            compat: potts(num_labels),
            kernels,
            exclude_self: false,
        }
    }
}

/// Marginals after every step plus per-step caches.
#[derive(Debug, Clone)]
pub struct MeanFieldTrace {
    pub states: Vec<MarginalState>,
    caches: Vec<StepCache>,
}

impl MeanFieldTrace {
    pub fn final_state(&self) -> &MarginalState {
        self.states.last().expect("trace has the initial state")
    }

    pub fn steps(&self) -> usize {
        self.caches.len()
    }
}

/// Runs `steps` updates from `mf_init`, recording everything for backprop.
pub fn mf_run_recorded(unaries: &Unaries, model: &CrfModel, steps: usize) -> Result<MeanFieldTrace> {
    if steps == 0 {
        return Err(Error::InvalidParameter("mean-field needs at least one step".into()));
    }
    let mut states = vec![mf_init(unaries)];
    let mut caches = Vec::with_capacity(steps);
    for t in 0..steps {
        let (next, cache) = step_cached(
            &states[t],
            unaries,
            model.kernels.at(t)?,
            model.compat.view(),
            model.exclude_self,
        )?;
        states.push(next);
        caches.push(cache);
    }
    Ok(MeanFieldTrace { states, caches })
}

pub fn mf_run(unaries: &Unaries, model: &CrfModel, steps: usize) -> Result<MarginalState> {
    let mut trace = mf_run_recorded(unaries, model, steps)?;
    Ok(trace.states.pop().expect("non-empty"))
}

/// Gradients from [`mf_backward`], indexed `[kernel set][kernel]`.
#[derive(Debug, Clone)]
pub struct MeanFieldGrads {
    pub unaries: Array2<f64>,
    pub filters: Vec<Vec<Option<FilterBank>>>,
    pub kernel_weights: Vec<Vec<f64>>,
}

/// Backward through softmax: `g_z = Q (g - <g, Q>)` row-wise.
fn softmax_backward(q: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = upstream.clone();
    for (mut g, qi) in out.outer_iter_mut().zip(q.outer_iter()) {
        let dot = g.dot(&qi);
        g.zip_mut_with(&qi, |gv, &qv| *gv = qv * (*gv - dot));
    }
    out
}

/// Reverse-mode pass through a recorded mean-field run.
pub fn mf_backward(
    trace: &MeanFieldTrace,
    model: &CrfModel,
    upstream: ArrayView2<f64>,
) -> Result<MeanFieldGrads> {
    let steps = trace.caches.len();
    if steps == 0 || trace.states.len() != steps + 1 {
        return Err(Error::StateMissing("trace must hold every intermediate Q"));
    }
    let dim = trace.states[0].q.dim();
    if upstream.dim() != dim {
        return Err(Error::shape("upstream gradient does not match Q"));
    }
    let mut filters: Vec<Vec<Option<FilterBank>>> = (0..model.kernels.sets())
        .map(|s| {
            model
                .kernels
                .set(s)
                .iter()
                .map(|k| k.bank().map(FilterBank::zeros_like))
                .collect()
        })
        .collect();
    let mut kernel_weights: Vec<Vec<f64>> = (0..model.kernels.sets())
        .map(|s| vec![0.0; model.kernels.set(s).len()])
        .collect();
    let mut g_unaries = Array2::zeros(dim);
    let mut g_q = upstream.to_owned();

    for t in (0..steps).rev() {
        let kernels = model.kernels.at(t)?;
        let set = model.kernels.set_index(t);
        let cache = &trace.caches[t];
        if cache.responses.len() != kernels.len() {
            return Err(Error::StateMissing("kernel responses missing for a step"));
        }
        let q_prev = &trace.states[t].q;
        let g_logits = softmax_backward(&trace.states[t + 1].q, &g_q);
        g_unaries -= &g_logits;
        // logits = -U - M mu^T  =>  dM = -g_logits mu
        let g_message = -g_logits.dot(&model.compat);
        let mut g_prev = Array2::zeros(dim);
        for (m, (kernel, resp)) in kernels.iter().zip(&cache.responses).enumerate() {
            kernel_weights[set][m] += (&g_message * &resp.output).sum();
            if kernel.weight == 0.0 {
                continue;
            }
            let g_out = &g_message * kernel.weight;
            let (gq, gb) =
                kernel.message_backward(q_prev.view(), model.exclude_self, resp, g_out.view())?;
            g_prev += &gq;
            if let (Some(acc), Some(gb)) = (filters[set][m].as_mut(), gb) {
                acc.axpy(1.0, &gb)?;
            }
        }
        g_q = g_prev;
    }
    // Q0 = softmax(-U)
    g_unaries -= &softmax_backward(&trace.states[0].q, &g_q);
    Ok(MeanFieldGrads {
        unaries: g_unaries,
        filters,
        kernel_weights,
    })
}
