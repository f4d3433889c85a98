//! DenseCRF refinement of per-pixel unaries over image features.
//!
//! Kernels are declared in a `key=value` config:
//!
//! ```text
//! steps = 2
//! exclude_self = false
//! kernel.0.features = xyrgb
//! kernel.0.scales = 0.01, 86.7      # position, value (or one per dim)
//! kernel.0.weight = 1
//! kernel.0.s = 2
//! kernel.0.sigma = 1                # Gaussian init, in lattice hops
//! kernel.0.filter = learned.pbf     # optional, overrides sigma
//! kernel.0.normalize = false
//! kernel.0.step = 0                 # optional; any step makes the run loose
//! ```

use std::path::PathBuf;

use super::features::{make_features, FeatureKind, FeatureRecipe};
use super::image::ImageBuffer;
use crate::config::Config;
use crate::densecrf::{mf_run, CrfModel, KernelSchedule, MarginalState, PairwiseKernel, Unaries};
use crate::error::{Error, Result};
use crate::permuto::{gaussian_init, FilterBank};

/// 8-bit colour scale converted to unit-range values.
const VALUE_UNIT: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub recipe: FeatureRecipe,
    pub weight: f64,
    pub s: usize,
    pub sigma: f64,
    pub filter: Option<PathBuf>,
    pub normalize: bool,
    pub step: Option<usize>,
}

impl KernelSpec {
    fn gaussian(recipe: FeatureRecipe) -> Self {
        KernelSpec {
            recipe,
            weight: 1.0,
            s: 2,
            sigma: 1.0,
            filter: None,
            normalize: false,
            step: None,
        }
    }

    fn bank(&self) -> Result<FilterBank> {
        let bank = match &self.filter {
            Some(path) => FilterBank::load(path)?,
            None => gaussian_init(self.recipe.dim(), self.s, self.sigma)?,
        };
        if bank.dim() != self.recipe.dim() || !bank.is_scalar() {
            return Err(Error::RecipeMismatch(format!(
                "kernel filter must be a scalar bank of dim {}",
                self.recipe.dim()
            )));
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfSpec {
    pub kernels: Vec<KernelSpec>,
    pub steps: usize,
    pub exclude_self: bool,
}

impl CrfSpec {
    /// Appearance kernel on position and colour plus a spatial smoothness
    /// kernel, with the semantic segmentation scales (colour scale in unit
    /// range values).
    pub fn default_for(channels: usize) -> Result<Self> {
        let kind = if channels == 3 {
            FeatureKind::PositionColor
        } else {
            FeatureKind::PositionIntensity
        };
        Ok(CrfSpec {
            kernels: vec![
                KernelSpec::gaussian(FeatureRecipe::split(kind, 0.01, 0.34 * VALUE_UNIT)?),
                KernelSpec::gaussian(FeatureRecipe::split(FeatureKind::Position, 0.34, 0.0)?),
            ],
            steps: 1,
            exclude_self: false,
        })
    }

    /// Reads `kernel.N.*` entries; falls back to [`CrfSpec::default_for`]
    /// when none are present.
    pub fn from_config(cfg: &Config, channels: usize) -> Result<Self> {
        let mut spec = Self::default_for(channels)?;
        if let Some(v) = cfg.parse("steps")? {
            spec.steps = v;
        }
        if let Some(v) = cfg.parse("exclude_self")? {
            spec.exclude_self = v;
        }
        let mut ids: Vec<usize> = cfg
            .keys()
            .filter_map(|k| k.strip_prefix("kernel.")?.split('.').next()?.parse().ok())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Ok(spec);
        }
        spec.kernels = ids
            .into_iter()
            .map(|id| kernel_from_config(cfg, id))
            .collect::<Result<_>>()?;
        Ok(spec)
    }

    fn schedule(&self, img: &ImageBuffer) -> Result<KernelSchedule> {
        let mut built = Vec::with_capacity(self.kernels.len());
        for spec in &self.kernels {
            let features = make_features(img, &spec.recipe)?;
            let ones = vec![1.0; spec.recipe.dim()];
            let kernel = PairwiseKernel::lattice(features.view(), &ones, spec.bank()?, spec.weight)?
                .with_normalization(spec.normalize);
            built.push((spec.step, kernel));
        }
        if built.iter().all(|(step, _)| step.is_none()) {
            return Ok(KernelSchedule::Shared(built.into_iter().map(|(_, k)| k).collect()));
        }
        let mut sets = vec![Vec::new(); self.steps];
        for (step, kernel) in built {
            let t = step.ok_or_else(|| {
                Error::InvalidParameter("loose runs need kernel.N.step on every kernel".into())
            })?;
            sets.get_mut(t)
                .ok_or_else(|| Error::InvalidParameter(format!("kernel step {t} >= steps")))?
                .push(kernel);
        }
        Ok(KernelSchedule::Loose(sets))
    }
}

fn kernel_from_config(cfg: &Config, id: usize) -> Result<KernelSpec> {
    let key = |name: &str| format!("kernel.{id}.{name}");
    let kind: FeatureKind = cfg
        .get(&key("features"))
        .ok_or_else(|| Error::InvalidParameter(format!("missing {}", key("features"))))?
        .parse()?;
    let scales = cfg.list(&key("scales"))?.unwrap_or_else(|| vec![1.0]);
    let recipe = match scales.len() {
        n if n == kind.dim() => FeatureRecipe::new(kind, scales)?,
        1 => FeatureRecipe::split(kind, scales[0], scales[0])?,
        2 => FeatureRecipe::split(kind, scales[0], scales[1])?,
        n => {
            return Err(Error::RecipeMismatch(format!(
                "{} has {n} scales; give 1, 2 or {}",
                key("scales"),
                kind.dim()
            )))
        }
    };
    let mut spec = KernelSpec::gaussian(recipe);
    if let Some(v) = cfg.parse(&key("weight"))? {
        spec.weight = v;
    }
    if let Some(v) = cfg.parse(&key("s"))? {
        spec.s = v;
    }
    if let Some(v) = cfg.parse(&key("sigma"))? {
        spec.sigma = v;
    }
    if let Some(v) = cfg.parse(&key("normalize"))? {
        spec.normalize = v;
    }
    spec.step = cfg.parse(&key("step"))?;
    spec.filter = cfg.get(&key("filter")).map(PathBuf::from);
    Ok(spec)
}

/// Mean-field marginals for `unaries` (one row per pixel) on `img`.
pub fn crf_refine(img: &ImageBuffer, unaries: &Unaries, spec: &CrfSpec) -> Result<MarginalState> {
    if unaries.num_points() != img.len() {
        return Err(Error::shape(format!(
            "{} unary rows for {} pixels",
            unaries.num_points(),
            img.len()
        )));
    }
    let model = CrfModel {
        exclude_self: spec.exclude_self,
        ..CrfModel::potts(unaries.num_labels(), spec.schedule(img)?)
    };
    mf_run(unaries, &model, spec.steps)
}
