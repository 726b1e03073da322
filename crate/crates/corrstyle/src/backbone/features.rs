//! Feature mining and attention capture: single noised forward passes that
//! expose the model's intermediate activations.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

use super::hooks::{FeatureCaptureHook, HookSet, QkvCaptureHook};
use super::{AttentionBundle, Backbone, DiffusionSchedule, FeatureLocator, FeatureMap, LatentTensor};

pub fn validate_locator(
    backbone: &dyn Backbone,
    locator: &FeatureLocator,
    schedule: &DiffusionSchedule,
) -> Result<()> {
    if locator.timestep < 1 || locator.timestep > schedule.total_steps() {
        return Err(Error::InvalidLocator(format!(
            "timestep {} outside [1, {}]",
            locator.timestep,
            schedule.total_steps()
        )));
    }
    backbone.info().block(&locator.layer).map_err(|_| {
        Error::InvalidLocator(format!("layer `{}` not in the candidate set", locator.layer))
    })?;
    Ok(())
}

/// Noise a clean latent to the given timestep with a seeded draw.
pub fn noised_latent(
    latent: &LatentTensor,
    timestep: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ab = schedule.alpha_bar(timestep);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let noise = Array3::from_shape_fn(latent.data.dim(), |_| {
        let v: f32 = rng.sample(StandardNormal);
        v
    });
    LatentTensor {
        data: latent.data.mapv(|v| v * a) + noise.mapv(|v| v * b),
        image_size: latent.image_size,
    }
}

/// Extract the feature map of one image at a locator: add
/// schedule-consistent noise with a fixed seed, run one forward pass, and
/// capture the block activations.
pub fn extract_features(
    backbone: &dyn Backbone,
    image: &RgbImage,
    locator: &FeatureLocator,
    schedule: &DiffusionSchedule,
    seed: u64,
    source_id: &str,
) -> Result<FeatureMap> {
    let latent = backbone.encode(image)?;
    extract_features_from_latent(backbone, &latent, locator, schedule, seed, source_id)
}

/// Same as [`extract_features`] but starting from an already-encoded latent.
pub fn extract_features_from_latent(
    backbone: &dyn Backbone,
    latent: &LatentTensor,
    locator: &FeatureLocator,
    schedule: &DiffusionSchedule,
    seed: u64,
    source_id: &str,
) -> Result<FeatureMap> {
    validate_locator(backbone, locator, schedule)?;
    let noised = noised_latent(latent, locator.timestep, schedule, seed);
    let mut capture = FeatureCaptureHook::new(vec![locator.layer.clone()]);
    let mut hooks = HookSet::new();
    hooks.push(&mut capture);
    backbone.predict_noise(&noised, locator.timestep, 0, &mut hooks)?;
    let data = capture
        .captured
        .remove(&locator.layer)
        .ok_or_else(|| Error::InvalidLocator(format!("layer `{}` produced no features", locator.layer)))?;
    Ok(FeatureMap {
        locator: locator.clone(),
        data,
        source: source_id.to_string(),
    })
}

/// Q/K/V of every self-attention block for one forward pass at `timestep`.
pub fn capture_attention(
    backbone: &dyn Backbone,
    latent: &LatentTensor,
    timestep: usize,
    schedule: &DiffusionSchedule,
) -> Result<AttentionBundle> {
    if timestep < 1 || timestep > schedule.total_steps() {
        return Err(Error::InvalidLocator(format!(
            "timestep {} outside [1, {}]",
            timestep,
            schedule.total_steps()
        )));
    }
    let mut capture = QkvCaptureHook::new(backbone.info().block_ids());
    let mut hooks = HookSet::new();
    hooks.push(&mut capture);
    backbone.predict_noise(latent, timestep, 0, &mut hooks)?;
    Ok(capture.into_bundle(timestep))
}
