//! Adapter over a pretrained latent-diffusion checkpoint: encoding and
//! decoding, DDIM inversion/sampling, and hook points exposing intermediate
//! features and attention tensors.
//!
//! The backbone is an interface; which concrete checkpoint backs it is a
//! config decision. This crate ships a deterministic synthetic binding
//! (see [`synthetic`]) that satisfies every backbone contract and runs
//! self-contained on CPU; bindings to full pretrained checkpoints plug in
//! behind the same [`Backbone`] trait.

pub mod ddim;
pub mod features;
pub mod hooks;
pub mod schedule;
pub mod synthetic;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub use ddim::{ddim_invert, ddim_sample};
pub use hooks::{AttentionHook, AttnSite, HookSet};
pub use schedule::DiffusionSchedule;
pub use synthetic::SyntheticBackbone;

/// Latent-space tensor `(channels, h, w)` tied to its source resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Array3<f32>,
    /// (height, width) of the image this latent corresponds to.
    pub image_size: (usize, usize),
}

impl LatentTensor {
    pub fn check_finite(&self, context: &str, timestep: usize) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
                timestep,
            })
        }
    }
}

/// Addresses one feature space: a timestep plus a decoder-block layer id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureLocator {
    pub timestep: usize,
    pub layer: String,
}

/// Intermediate activation block at a locator.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub locator: FeatureLocator,
    /// `(feature_dim, h, w)`.
    pub data: Array3<f32>,
    /// Identifier of the image the features came from.
    pub source: String,
}

/// Captured Q/K/V of one self-attention block.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub block: String,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    pub heads: usize,
    pub head_dim: usize,
}

/// All self-attention captures of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionBundle {
    pub timestep: usize,
    pub records: Vec<AttentionRecord>,
}

/// One decoder up-block: its id, feature width, and spatial scale relative
/// to the latent grid (1 = latent resolution).
#[derive(Debug, Clone)]
pub struct BlockInfo {
    pub id: String,
    pub channels: usize,
    pub scale: usize,
}

#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub id: String,
    pub latent_channels: usize,
    /// Pixel-to-latent spatial downsampling factor.
    pub downsample_factor: usize,
    /// Decoder up-blocks, each with one self-attention block.
    pub blocks: Vec<BlockInfo>,
}

impl CheckpointInfo {
    pub fn block(&self, id: &str) -> Result<&BlockInfo> {
        self.blocks
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::UnknownBlock(id.to_string()))
    }

    pub fn block_ids(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.id.clone()).collect()
    }

    /// Layer grid size for an image of the given resolution.
    pub fn block_grid(&self, id: &str, image_size: (usize, usize)) -> Result<(usize, usize)> {
        let block = self.block(id)?;
        let div = self.downsample_factor * block.scale;
        Ok((image_size.0 / div, image_size.1 / div))
    }
}

/// A loaded latent-diffusion checkpoint.
pub trait Backbone: Send + Sync {
    fn info(&self) -> &CheckpointInfo;

    /// Image in `[0, 1]` with dimensions divisible by the downsampling
    /// factor -> latent.
    fn encode(&self, image: &RgbImage) -> Result<LatentTensor>;

    /// Latent -> image in `[0, 1]` at the original resolution.
    fn decode(&self, latent: &LatentTensor) -> Result<RgbImage>;

    /// One U-Net forward pass predicting noise at `timestep`, dispatching
    /// the hook set at every self-attention block.
    fn predict_noise(
        &self,
        latent: &LatentTensor,
        timestep: usize,
        site_step: usize,
        hooks: &mut HookSet<'_>,
    ) -> Result<Array3<f32>>;
}

/// Open a checkpoint by its config identifier.
pub fn load_checkpoint(id: &str) -> Result<Box<dyn Backbone>> {
    match id {
        "synthetic-v1" => Ok(Box::new(SyntheticBackbone::new(id, 0xc0c0))),
        other if other.starts_with("synthetic-") => {
            // Alternate synthetic checkpoints differ only by weight seed;
            // this mirrors swapping checkpoints purely through config.
            let seed = other
                .trim_start_matches("synthetic-")
                .bytes()
                .fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64));
            Ok(Box::new(SyntheticBackbone::new(other, seed)))
        }
        other => Err(Error::Checkpoint(format!(
            "checkpoint `{other}` is not available; pretrained latent-diffusion weights must be \
             bound behind the Backbone trait (available: synthetic-*)"
        ))),
    }
}
