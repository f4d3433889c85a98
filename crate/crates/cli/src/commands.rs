//! Pipeline subcommands.

use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args};
use ndarray::Array2;
use permutofilt::bi_explicit::{default_thetas, superpixel_reduce, InceptionModule};
use permutofilt::config::Config;
use permutofilt::densecrf::Unaries;
use permutofilt::permuto::{gaussian_init, FilterBank, FilterOptions, LatticeOperators};
use permutofilt::pipelines::io::{load_segment_map, load_unaries, results_csv, ResultRow};
use permutofilt::pipelines::synthetic::{add_gaussian_noise, shaded_scene};
use permutofilt::pipelines::{
    bicubic_upsample, crf_refine, denoise_apply as apply_denoiser, denoise_recipe,
    denoise_train as train_denoiser, joint_upsample, make_features, mesh_denoise as filter_mesh, psnr,
    rmse, upsample_recipe, CrfSpec, DenoiseTrainConfig, FeatureKind, FeatureRecipe, ImageBuffer,
    PointCloudSignal,
};
use permutofilt::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Failure, Global, Outcome};

fn parse_kind(s: &str) -> Result<FeatureKind, String> {
    s.parse().map_err(|e: permutofilt::Error| e.to_string())
}

/// `scales` may give every dimension, or one position and one value scale,
/// or a single scale for everything.
fn recipe(kind: FeatureKind, scales: &[f64]) -> Result<FeatureRecipe, Failure> {
    let r = match scales.len() {
        1 => FeatureRecipe::split(kind, scales[0], scales[0]),
        2 if kind.dim() != 2 => FeatureRecipe::split(kind, scales[0], scales[1]),
        _ => FeatureRecipe::new(kind, scales.to_vec()),
    };
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn load_bank(filter: &Option<PathBuf>, d: usize, s: usize, sigma: f64) -> Result<FilterBank, Failure> {
    let bank = match filter {
        Some(path) => at(path, FilterBank::load(path))?,
        None => gaussian_init(d, s, sigma).map_err(|e| Failure::Usage(e.to_string()))?,
    };
    if bank.dim() != d {
        return Err(Failure::Data(format!(
            "filter is {}-dimensional, features are {d}-dimensional",
            bank.dim()
        )));
    }
    Ok(bank)
}

/// Prefixes data errors with the file they came from.
fn at<T>(path: &Path, r: permutofilt::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        permutofilt::Error::Format { .. } => Failure::Data(e.to_string()),
        other => Failure::Data(format!("{}: {other}", path.display())),
    })
}

fn load_image(path: &Path) -> Result<ImageBuffer, Failure> {
    at(path, ImageBuffer::load(path))
}

fn require_out(g: &Global) -> Result<&Path, Failure> {
    g.out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required for this command".into()))
}

fn load_config(g: &Global) -> Result<Config, Failure> {
    Ok(match &g.config {
        Some(path) => at(path, Config::load(path))?,
        None => Config::default(),
    })
}

/// Writes to `path`, or stdout when absent.
fn emit(text: &str, path: Option<&Path>) -> Outcome {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("kernel").required(true).args(["gauss", "filter"])))]
pub struct FilterArgs {
    /// Input image (PNG, PGM or PPM).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Feature space: xy, xyv or xyrgb.
    #[arg(long, value_parser = parse_kind, default_value = "xyrgb")]
    pub features: FeatureKind,
    /// Comma-separated feature scales.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub scales: Vec<f64>,
    /// Use a Gaussian filter of --sigma lattice hops.
    #[arg(long)]
    pub gauss: bool,
    /// PBF1 filter weights.
    #[arg(long)]
    pub filter: Option<PathBuf>,
    /// Neighbourhood size in lattice hops (Gaussian only).
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Skip normalisation by the filtered point density.
    #[arg(long)]
    pub raw: bool,
}

pub fn filter(g: &Global, a: FilterArgs) -> Outcome {
    let out = require_out(g)?;
    let img = load_image(&a.input)?;
    let recipe = recipe(a.features, &a.scales)?;
    let bank = load_bank(&a.filter, recipe.dim(), a.s, a.sigma)?;
    let f = make_features(&img, &recipe)?;
    let ops = LatticeOperators::new(f.view(), f.view(), &vec![1.0; recipe.dim()], bank.hops())?;
    let opts = FilterOptions {
        normalize: !a.raw,
        exclude_self: false,
    };
    let y = ops.apply(img.pixels().view(), &bank, opts)?.output;
    ImageBuffer::from_pixels(img.width(), img.height(), y.view())?.save(out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    /// Low-resolution image.
    #[arg(long)]
    pub low: PathBuf,
    /// High-resolution guidance image; its size sets the output size.
    #[arg(long)]
    pub guide: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "xyv")]
    pub features: FeatureKind,
    /// Feature scales per high-resolution pixel and unit value (default
    /// depends on the factor).
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long)]
    pub filter: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub s: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long)]
    pub raw: bool,
    /// Ground truth; adds a method,image,psnr table for bilateral and bicubic.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Where the table goes (default stdout).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn upsample(g: &Global, a: UpsampleArgs) -> Outcome {
    if g.out.is_none() && a.reference.is_none() {
        return Err(Failure::Usage("upsample needs --out, --reference or both".into()));
    }
    let low = load_image(&a.low)?;
    let guide = load_image(&a.guide)?;
    let factor = guide.width() / low.width().max(1);
    let recipe = match &a.scales {
        Some(s) => recipe(a.features, s)?,
        None if a.features == FeatureKind::PositionIntensity => {
            upsample_recipe(factor).map_err(|e| Failure::Data(e.to_string()))?
        }
        None => return Err(Failure::Usage("--scales is required for this feature kind".into())),
    };
    let bank = load_bank(&a.filter, recipe.dim(), a.s, a.sigma)?;
    let up = joint_upsample(&low, &guide, &recipe, &bank, !a.raw)?;
    if let Some(out) = &g.out {
        up.save(out)?;
    }
    if let Some(path) = &a.reference {
        let truth = load_image(path)?;
        let cubic = bicubic_upsample(&low, factor)?;
        let name = stem(path);
        let rows = [
            ResultRow {
                method: "bilateral".into(),
                image: name.clone(),
                value: psnr(&up, &truth)?,
            },
            ResultRow {
                method: "bicubic".into(),
                image: name,
                value: psnr(&cubic, &truth)?,
            },
        ];
        emit(&results_csv("psnr", &rows), a.csv.as_deref())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("data").required(true).args(["noisy", "synthetic"])))]
pub struct DenoiseTrainArgs {
    /// Noisy training images, comma-separated.
    #[arg(long, value_delimiter = ',', requires = "clean")]
    pub noisy: Vec<PathBuf>,
    /// Clean targets in the same order.
    #[arg(long, value_delimiter = ',')]
    pub clean: Vec<PathBuf>,
    /// Train on this many seeded synthetic gray scenes instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side of the synthetic images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Noise standard deviation for synthetic pairs, in 8-bit levels.
    #[arg(long, default_value_t = 25.0)]
    pub noise: f64,
    /// (x, y, v) scales; defaults to the denoising protocol.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long)]
    pub s: Option<usize>,
    /// Width in lattice hops of the starting Gaussian.
    #[arg(long)]
    pub init_sigma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub raw: bool,
}

/// Denoising defaults overlaid with the config file, then with flags.
fn denoise_config(g: &Global, a: &DenoiseTrainArgs) -> Result<(DenoiseTrainConfig, FeatureRecipe), Failure> {
    let defaults = DenoiseTrainConfig::default();
    let file = load_config(g)?;
    let mut cfg = Config::default();
    cfg.set("lr", defaults.train.lr.to_string());
    cfg.set("epochs", defaults.train.epochs.to_string());
    for k in file.keys() {
        cfg.set(k, file.get(k).unwrap_or_default());
    }
    let mut train = TrainConfig::from_config(&cfg)?;
    train.seed = g.seed;
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.lr {
        train.lr = v;
    }
    train.optimizer().map_err(|e| Failure::Usage(e.to_string()))?;
    let scales = a
        .scales
        .clone()
        .or_else(|| (!train.feature_scales.is_empty()).then(|| train.feature_scales.clone()));
    let recipe = match scales {
        Some(s) => recipe(FeatureKind::PositionIntensity, &s)?,
        None => denoise_recipe(),
    };
    let out = DenoiseTrainConfig {
        s: a.s.or(cfg.parse("s")?).unwrap_or(defaults.s),
        init_sigma: a.init_sigma.or(cfg.parse("init_sigma")?).unwrap_or(defaults.init_sigma),
        normalize: !a.raw && cfg.parse("normalize")?.unwrap_or(defaults.normalize),
        train,
    };
    Ok((out, recipe))
}

/// Seeded clean scenes with clipped Gaussian noise, as `(noisy, clean)`.
pub fn synthetic_pairs(n: usize, size: usize, sigma: f64, seed: u64) -> Result<Vec<(ImageBuffer, ImageBuffer)>, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let clean = shaded_scene(size, size, &mut rng)?;
        let noisy = add_gaussian_noise(&clean, sigma, &mut rng)?;
        pairs.push((noisy, clean));
    }
    Ok(pairs)
}

pub fn denoise_train(g: &Global, a: DenoiseTrainArgs) -> Outcome {
    let out = require_out(g)?;
    let (cfg, recipe) = denoise_config(g, &a)?;
    let pairs = match a.synthetic {
        Some(n) => synthetic_pairs(n, a.size, a.noise / 255.0, g.seed)?,
        None => {
            if a.noisy.len() != a.clean.len() {
                return Err(Failure::Usage(format!(
                    "{} noisy images but {} clean ones",
                    a.noisy.len(),
                    a.clean.len()
                )));
            }
            a.noisy
                .iter()
                .zip(&a.clean)
                .map(|(n, c)| Ok((load_image(n)?.to_gray(), load_image(c)?.to_gray())))
                .collect::<Result<_, Failure>>()?
        }
    };
    let outcome = train_denoiser(&pairs, &recipe, &cfg)?;
    outcome.bank.save(out)?;
    println!(
        "initial_mse={:.6e} best_mse={:.6e} epochs={}",
        outcome.initial_loss,
        outcome.best_loss,
        outcome.epoch_losses.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DenoiseApplyArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// PBF1 weights from denoise-train; a Gaussian of --sigma when absent.
    #[arg(long)]
    pub filter: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2)]
    pub s: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long)]
    pub raw: bool,
    /// Clean image; adds a method,image,psnr table for noisy and filtered.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn denoise_apply(g: &Global, a: DenoiseApplyArgs) -> Outcome {
    if g.out.is_none() && a.reference.is_none() {
        return Err(Failure::Usage("denoise-apply needs --out, --reference or both".into()));
    }
    let img = load_image(&a.input)?.to_gray();
    let recipe = match &a.scales {
        Some(s) => recipe(FeatureKind::PositionIntensity, s)?,
        None => denoise_recipe(),
    };
    let bank = load_bank(&a.filter, recipe.dim(), a.s, a.sigma)?;
    let method = if a.filter.is_some() { "learned" } else { "gauss" };
    let out = apply_denoiser(&img, &bank, &recipe, !a.raw)?;
    if let Some(path) = &g.out {
        out.save(path)?;
    }
    if let Some(path) = &a.reference {
        let truth = load_image(path)?.to_gray();
        let name = stem(&a.input);
        let rows = [
            ResultRow {
                method: "noisy".into(),
                image: name.clone(),
                value: psnr(&img, &truth)?,
            },
            ResultRow {
                method: method.into(),
                image: name,
                value: psnr(&out, &truth)?,
            },
        ];
        emit(&results_csv("psnr", &rows), a.csv.as_deref())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    /// Point cloud CSV with value_k and feat_k columns.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub filter: Option<PathBuf>,
    /// One scale for all features, or one per feature.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub scales: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long)]
    pub raw: bool,
    /// Clean point cloud; adds a method,image,rmse table.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn mesh_denoise(g: &Global, a: MeshArgs) -> Outcome {
    if g.out.is_none() && a.reference.is_none() {
        return Err(Failure::Usage("mesh-denoise needs --out, --reference or both".into()));
    }
    let noisy = at(&a.input, PointCloudSignal::load_csv(&a.input))?;
    let d = noisy.features.ncols();
    let scales = match a.scales.len() {
        1 => vec![a.scales[0]; d],
        n if n == d => a.scales.clone(),
        n => return Err(Failure::Usage(format!("{n} scales for {d} features"))),
    };
    let bank = load_bank(&a.filter, d, a.s, a.sigma)?;
    let values = filter_mesh(&noisy, &bank, &scales, !a.raw)?;
    if let Some(path) = &g.out {
        PointCloudSignal::new(values.clone(), noisy.features.clone())?.save_csv(path)?;
    }
    if let Some(path) = &a.reference {
        let clean = at(path, PointCloudSignal::load_csv(path))?;
        let name = stem(&a.input);
        let rows = [
            ResultRow {
                method: "noisy".into(),
                image: name.clone(),
                value: rmse(&noisy.values, &clean.values)?,
            },
            ResultRow {
                method: "filtered".into(),
                image: name,
                value: rmse(&values, &clean.values)?,
            },
        ];
        emit(&results_csv("rmse", &rows), a.csv.as_deref())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CrfArgs {
    /// Image supplying the pairwise features.
    #[arg(long)]
    pub image: PathBuf,
    /// Binary unaries: u32 n, u32 L, then n*L f32 (little endian).
    #[arg(long)]
    pub unaries: PathBuf,
    /// Mean-field steps (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Labels go to a gray image for .png/.pgm outputs, else one per line.
pub fn crf(g: &Global, a: CrfArgs) -> Outcome {
    let out = require_out(g)?;
    let img = load_image(&a.image)?;
    let unaries = Unaries::new(at(&a.unaries, load_unaries(&a.unaries))?)?;
    let mut spec = CrfSpec::from_config(&load_config(g)?, img.channels())?;
    if let Some(steps) = a.steps {
        spec.steps = steps;
    }
    let labels = crf_refine(&img, &unaries, &spec)?.labels();
    let ext = out
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    if matches!(ext.as_deref(), Some("png" | "pgm")) {
        if unaries.num_labels() > 256 {
            return Err(Failure::Data("more than 256 labels do not fit an 8-bit map".into()));
        }
        let data = labels.iter().map(|&l| l as f64 / 255.0).collect();
        ImageBuffer::new(img.width(), img.height(), 1, data)?.save(out)?;
    } else {
        let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        emit(&text, Some(out))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BiFilterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "xyv")]
    pub features: FeatureKind,
    #[arg(long, value_delimiter = ',', required = true)]
    pub scales: Vec<f64>,
    /// Number of kernel scales.
    #[arg(long, default_value_t = 3)]
    pub h: usize,
    /// Explicit kernel widths (overrides --h).
    #[arg(long, value_delimiter = ',')]
    pub thetas: Option<Vec<f64>>,
    /// Segment map (CSV or gray raster); filters from superpixel means.
    #[arg(long)]
    pub segments: Option<PathBuf>,
}

/// Beyond this many kernel entries the dense gram matrix gets impractical.
const MAX_GRAM: usize = 64 << 20;

pub fn bi_filter(g: &Global, a: BiFilterArgs) -> Outcome {
    let out = require_out(g)?;
    let img = load_image(&a.input)?;
    let recipe = recipe(a.features, &a.scales)?;
    let f = make_features(&img, &recipe)?;
    let z = img.pixels();
    let (z_in, f_in) = match &a.segments {
        Some(path) => superpixel_reduce(z.view(), f.view(), &at(path, load_segment_map(path))?)?,
        None => (z.clone(), f.clone()),
    };
    if f_in.nrows().saturating_mul(f.nrows()) > MAX_GRAM {
        return Err(Failure::Usage(format!(
            "{}x{} gram matrix is too large; pass --segments",
            f.nrows(),
            f_in.nrows()
        )));
    }
    let thetas = a.thetas.unwrap_or_else(|| default_thetas(a.h));
    let h = thetas.len();
    let lambda = Array2::eye(recipe.dim());
    let w = Array2::from_elem((h, img.channels()), 1.0 / h as f64);
    let mut module = InceptionModule::new(lambda, thetas, w).map_err(|e| Failure::Usage(e.to_string()))?;
    let y = module.forward(z_in.view(), f_in.view(), f.view())?;
    ImageBuffer::from_pixels(img.width(), img.height(), y.view())?.save(out)?;
    Ok(())
}
