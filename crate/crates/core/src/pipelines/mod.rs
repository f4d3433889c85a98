//! End-to-end flows on images and point clouds.

pub mod crf;
pub mod denoise;
pub mod features;
pub mod image;
pub mod io;
pub mod mesh;
pub mod synthetic;
pub mod upsample;

pub use crf::{crf_refine, CrfSpec, KernelSpec};
pub use denoise::{denoise_apply, denoise_train, DenoiseOutcome, DenoiseTrainConfig};
pub use features::{denoise_recipe, make_features, upsample_recipe, FeatureKind, FeatureRecipe};
pub use image::{mse, psnr, ImageBuffer, PSNR_CAP};
pub use mesh::{mesh_denoise, rmse, PointCloudSignal};
pub use upsample::{bicubic_upsample, box_downsample, joint_upsample, upsample_guided};
