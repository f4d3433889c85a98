//! Losses, SGD with momentum and weight decay, and finite-difference
//! gradient checking.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};

/// Training loss selection.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    Mse,
    Logistic,
    /// Per-class weights, e.g. inverse class frequency.
    WeightedLogistic(Vec<f64>),
}

/// Mean squared error over all `n * c` entries and its gradient.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let count = pred.len().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
    Ok((loss, diff * (2.0 / count)))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: ArrayView2<f64>) -> Array2<f64> {
    let mut out = scores.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Softmax cross-entropy averaged over points, optionally class-weighted:
/// `L = (1/n) sum_i w[y_i] * (-log softmax(s_i)[y_i])`.
pub fn logistic_loss(
    scores: ArrayView2<f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Array2<f64>)> {
    let (n, num_labels) = scores.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} points", labels.len())));
    }
    if let Some(w) = weights {
        if w.len() != num_labels {
            return Err(Error::shape(format!(
                "{} class weights for {num_labels} labels",
                w.len()
            )));
        }
        if w.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("class weights must be > 0".into()));
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_labels) {
        return Err(Error::LabelOutOfRange { label, num_labels });
    }
    let mut grad = softmax_rows(scores);
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, (&label, mut g)) in labels.iter().zip(grad.outer_iter_mut()).enumerate() {
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let w = weights.map_or(1.0, |w| w[label]);
        loss += w * (lse - row[label]);
        g[label] -= 1.0;
        g.mapv_inplace(|v| v * w * inv_n);
    }
    Ok((loss * inv_n, grad))
}

/// SGD with momentum: `v <- mu v - lr (g + wd theta)`, `theta <- theta + v`.
///
/// Weight decay is folded into the gradient and only applied to parameter
/// slots stepped with `decay = true`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!("momentum {momentum} not in [0, 1)")));
        }
        if !lr.is_finite() || lr < 0.0 || !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::InvalidParameter("lr and weight decay must be finite and >= 0".into()));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, slot: usize) -> Option<&[f64]> {
        self.velocity.get(slot).and_then(|v| v.as_deref())
    }

    /// Updates the parameter tensor registered under `slot`.
    pub fn step(&mut self, slot: usize, params: &mut [f64], grads: &[f64], decay: bool) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, None);
        }
        let v = self.velocity[slot].get_or_insert_with(|| vec![0.0; params.len()]);
        if v.len() != params.len() {
            return Err(Error::shape(format!(
                "slot {slot} was registered with {} parameters, got {}",
                v.len(),
                params.len()
            )));
        }
        let wd = if decay { self.weight_decay } else { 0.0 };
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
            let g = g + wd * *p;
            *v = self.momentum * *v - self.lr * g;
            *p += *v;
        }
        Ok(())
    }
}

/// Mini-batch index lists over `n` items in a seeded random order.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Hyper-parameters read from a `key=value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub feature_scales: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-6,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 10,
            batch: 1,
            loss: LossKind::Mse,
            seed: 0,
            feature_scales: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let mut out = TrainConfig::default();
        if let Some(v) = cfg.parse("lr")? {
            out.lr = v;
        }
        if let Some(v) = cfg.parse("momentum")? {
            out.momentum = v;
        }
        if let Some(v) = cfg.parse("weight_decay")? {
            out.weight_decay = v;
        }
        if let Some(v) = cfg.parse("epochs")? {
            out.epochs = v;
        }
        if let Some(v) = cfg.parse("batch")? {
            out.batch = v;
        }
        if let Some(v) = cfg.parse("seed")? {
            out.seed = v;
        }
        if let Some(v) = cfg.list("feature_scales")? {
            out.feature_scales = v;
        }
        if let Some(loss) = cfg.get("loss") {
            out.loss = match loss {
                "mse" => LossKind::Mse,
                "logistic" => LossKind::Logistic,
                "weighted_logistic" => LossKind::WeightedLogistic(
                    cfg.list("class_weights")?.ok_or_else(|| {
                        Error::InvalidParameter("weighted_logistic needs class_weights".into())
                    })?,
                ),
                other => return Err(Error::InvalidParameter(format!("unknown loss '{other}'"))),
            };
        }
        Sgd::new(out.lr, out.momentum, out.weight_decay)?;
        Ok(out)
    }

    pub fn optimizer(&self) -> Result<Sgd> {
        Sgd::new(self.lr, self.momentum, self.weight_decay)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Coordinates probed; all of them when at least the parameter count.
    pub probes: usize,
    /// Step as a fraction of `max(|theta_i|, 1)`.
    pub step: f64,
    pub tolerance: f64,
    /// Components smaller than `floor * max|analytic|` are compared against
    /// that floor instead of their own magnitude.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            probes: usize::MAX,
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares `analytic` against central differences of `loss` at `params`.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    cfg: &GradCheck,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::shape("gradient and parameter lengths differ"));
    }
    let mut indices: Vec<usize> = (0..params.len()).collect();
    if cfg.probes < params.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        indices.shuffle(&mut rng);
        indices.truncate(cfg.probes);
        indices.sort_unstable();
    }
    let g_max = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (cfg.floor * g_max).max(f64::MIN_POSITIVE);
    let mut work = params.to_vec();
    let mut probes = Vec::with_capacity(indices.len());
    for i in indices {
        let h = cfg.step * params[i].abs().max(1.0);
        work[i] = params[i] + h;
        let up = loss(&work);
        work[i] = params[i] - h;
        let down = loss(&work);
        work[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        probes.push(Probe {
            index: i,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = probes.iter().fold(0.0f64, |m, p| m.max(p.rel_err));
    let failures = probes
        .iter()
        .filter(|p| !(p.rel_err < cfg.tolerance))
        .count();
    Ok(GradCheckReport {
        probes,
        max_rel_err,
        failures,
    })
}
