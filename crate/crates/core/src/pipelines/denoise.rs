//! Single-kernel bilateral denoising: Gaussian baseline and learned filter.

use ndarray::Array2;

use super::features::{make_features, FeatureRecipe};
use super::image::ImageBuffer;
use crate::error::{Error, Result};
use crate::permuto::{gaussian_init, FilterBank, FilterOptions, LatticeOperators};
use crate::training::{mse_loss, shuffled_batches, TrainConfig};

fn operators(img: &ImageBuffer, recipe: &FeatureRecipe, s: usize) -> Result<LatticeOperators> {
    let f = make_features(img, recipe)?;
    LatticeOperators::new(f.view(), f.view(), &vec![1.0; recipe.dim()], s)
}

fn filter_opts(normalize: bool) -> FilterOptions {
    FilterOptions {
        normalize,
        exclude_self: false,
    }
}

/// Filters `img` at its own features; output clamped to `[0, 1]`.
pub fn denoise_apply(
    img: &ImageBuffer,
    bank: &FilterBank,
    recipe: &FeatureRecipe,
    normalize: bool,
) -> Result<ImageBuffer> {
    let ops = operators(img, recipe, bank.hops())?;
    let out = ops.apply(img.pixels().view(), bank, filter_opts(normalize))?.output;
    ImageBuffer::from_pixels(img.width(), img.height(), out.view())
}

#[derive(Debug, Clone)]
pub struct DenoiseTrainConfig {
    pub train: TrainConfig,
    /// Neighbourhood size of the learned filter.
    pub s: usize,
    /// Width, in lattice hops, of the Gaussian the filter starts from.
    pub init_sigma: f64,
    pub normalize: bool,
}

impl Default for DenoiseTrainConfig {
    /// Protocol momentum and weight decay; learning rate and epochs sized
    /// for per-entry mean squared error on unit-range images.
    fn default() -> Self {
        DenoiseTrainConfig {
            train: TrainConfig {
                lr: 1.0,
                epochs: 30,
                ..TrainConfig::default()
            },
            s: 2,
            init_sigma: 1.0,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseOutcome {
    /// Filter with the lowest training loss seen, the start included.
    pub bank: FilterBank,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Mean training MSE after each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Sample {
    ops: LatticeOperators,
    noisy: Array2<f64>,
    clean: Array2<f64>,
}

fn sample_loss(sample: &Sample, bank: &FilterBank, normalize: bool) -> Result<f64> {
    let out = sample.ops.apply(sample.noisy.view(), bank, filter_opts(normalize))?.output;
    Ok(mse_loss(out.view(), sample.clean.view())?.0)
}

fn mean_loss(samples: &[Sample], bank: &FilterBank, normalize: bool) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(s, bank, normalize)?;
    }
    Ok(total / samples.len() as f64)
}

/// SGD on the mean squared error against the clean images, starting from a
/// Gaussian filter. Returns the best filter by training loss.
pub fn denoise_train(
    pairs: &[(ImageBuffer, ImageBuffer)],
    recipe: &FeatureRecipe,
    cfg: &DenoiseTrainConfig,
) -> Result<DenoiseOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let samples = pairs
        .iter()
        .map(|(noisy, clean)| {
            if noisy.channels() != clean.channels() || noisy.len() != clean.len() {
                return Err(Error::shape("noisy and clean images differ in shape"));
            }
            Ok(Sample {
                ops: operators(noisy, recipe, cfg.s)?,
                noisy: noisy.pixels(),
                clean: clean.pixels(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut bank = gaussian_init(recipe.dim(), cfg.s, cfg.init_sigma)?;
    let initial_loss = mean_loss(&samples, &bank, cfg.normalize)?;
    let mut best = (initial_loss, bank.clone());
    let mut sgd = cfg.train.optimizer()?;
    let mut rng = cfg.train.rng();
    let opts = filter_opts(cfg.normalize);
    let mut epoch_losses = Vec::with_capacity(cfg.train.epochs);

    for _ in 0..cfg.train.epochs {
        for batch in shuffled_batches(samples.len(), cfg.train.batch, &mut rng) {
            let mut grad = bank.zeros_like();
            for &i in &batch {
                let s = &samples[i];
                let resp = s.ops.apply(s.noisy.view(), &bank, opts)?;
                let (_, g_out) = mse_loss(resp.output.view(), s.clean.view())?;
                let (_, g_bank) = s.ops.apply_backward(s.noisy.view(), &bank, opts, &resp, g_out.view())?;
                grad.axpy(1.0 / batch.len() as f64, &g_bank)?;
            }
            sgd.step(0, bank.weights_mut(), grad.weights(), true)?;
        }
        let loss = mean_loss(&samples, &bank, cfg.normalize)?;
        if !loss.is_finite() {
            return Err(Error::InvalidParameter(
                "training diverged; lower the learning rate".into(),
            ));
        }
        if loss < best.0 {
            best = (loss, bank.clone());
        }
        epoch_losses.push(loss);
    }
    Ok(DenoiseOutcome {
        bank: best.1,
        initial_loss,
        best_loss: best.0,
        epoch_losses,
    })
}
