//! Pluggable perceptual feature extractors.
//!
//! The metric definitions are extractor-agnostic: anything implementing
//! [`FeatureExtractor`] can back LPIPS/CFSD, and anything producing pooled
//! embeddings can back FID. The built-in extractor is a fixed, seeded
//! convolutional pyramid so the whole toolkit runs self-contained and
//! deterministically; externally downloaded extractor weights are declared
//! through an asset manifest and verified by content hash.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub channels: usize,
    /// Total spatial downsampling factor relative to the canonical input.
    pub downsample: usize,
    /// Per-layer LPIPS weight w_l.
    pub weight: f64,
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn layers(&self) -> &[LayerSpec];
    /// Canonical (height, width) the extractor resizes inputs to.
    fn canonical_size(&self) -> (usize, usize);
    /// Per-layer activations for an image, shapes `(channels, H_l, W_l)`.
    fn extract(&self, image: &RgbImage) -> Result<Vec<Array3<f32>>>;

    /// Pooled embedding for distribution-level metrics: channel-wise spatial
    /// mean of the deepest layer.
    fn pooled_embedding(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let feats = self.extract(image)?;
        let deepest = feats.last().ok_or_else(|| Error::EmptyInput("extractor has no layers".into()))?;
        let (c, h, w) = deepest.dim();
        let n = (h * w) as f64;
        Ok((0..c)
            .map(|k| {
                deepest
                    .index_axis(ndarray::Axis(0), k)
                    .iter()
                    .map(|v| *v as f64)
                    .sum::<f64>()
                    / n
            })
            .collect())
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers()
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Config(format!("extractor `{}` has no layer `{}`", self.id(), name)))
    }
}

/// Deterministic multi-scale convolutional pyramid with seeded weights.
///
/// Each stage blurs with a fixed 3x3 kernel, average-pools 2x, applies a
/// seeded 1x1 projection and a tanh nonlinearity. Stages play the role of
/// conv1..conv4 in a VGG-style feature hierarchy.
pub struct SeededConvExtractor {
    id: String,
    canonical: (usize, usize),
    layers: Vec<LayerSpec>,
    /// Per stage: projection matrix (out_ch, in_ch) and bias (out_ch).
    stages: Vec<(Array2<f32>, Vec<f32>)>,
}

impl SeededConvExtractor {
    pub fn new(id: impl Into<String>, seed: u64, canonical: (usize, usize)) -> Self {
        let id = id.into();
        let channel_plan = [(3usize, 8usize), (8, 16), (16, 32), (32, 64)];
        let weights = [0.3, 0.3, 0.2, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut layers = Vec::new();
        for (i, &(cin, cout)) in channel_plan.iter().enumerate() {
            let scale = 1.0 / (cin as f32).sqrt();
            let proj = Array2::from_shape_fn((cout, cin), |_| {
                let v: f32 = rng.sample(StandardNormal);
                v * scale
            });
            let bias: Vec<f32> = (0..cout)
                .map(|_| {
                    let v: f32 = rng.sample(StandardNormal);
                    v * 0.1
                })
                .collect();
            stages.push((proj, bias));
            layers.push(LayerSpec {
                name: format!("conv{}", i + 1),
                channels: cout,
                downsample: 1 << (i + 1),
                weight: weights[i],
            });
        }
        Self {
            id,
            canonical,
            layers,
            stages,
        }
    }

    /// The default built-in extractor.
    pub fn builtin() -> Self {
        Self::new("builtin-perceptual-v1", 0x5eed_f00d, (64, 64))
    }

    fn blur_and_pool(input: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = input.dim();
        // 3x3 binomial blur, clamped borders.
        let mut blurred = Array3::zeros((c, h, w));
        let k = [[1.0f32, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let sy = (y + dy).saturating_sub(1).min(h - 1);
                            let sx = (x + dx).saturating_sub(1).min(w - 1);
                            acc += k[dy][dx] * input[[ch, sy, sx]];
                        }
                    }
                    blurred[[ch, y, x]] = acc / 16.0;
                }
            }
        }
        let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
        let mut out = Array3::zeros((c, oh, ow));
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let y0 = (2 * y).min(h - 1);
                    let y1 = (2 * y + 1).min(h - 1);
                    let x0 = (2 * x).min(w - 1);
                    let x1 = (2 * x + 1).min(w - 1);
                    out[[ch, y, x]] = 0.25
                        * (blurred[[ch, y0, x0]]
                            + blurred[[ch, y0, x1]]
                            + blurred[[ch, y1, x0]]
                            + blurred[[ch, y1, x1]]);
                }
            }
        }
        out
    }

    fn project(stage: &(Array2<f32>, Vec<f32>), input: &Array3<f32>) -> Array3<f32> {
        let (proj, bias) = stage;
        let (cin, h, w) = input.dim();
        let cout = proj.nrows();
        debug_assert_eq!(proj.ncols(), cin);
        let mut out = Array3::zeros((cout, h, w));
        for y in 0..h {
            for x in 0..w {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for i in 0..cin {
                        acc += proj[[o, i]] * input[[i, y, x]];
                    }
                    out[[o, y, x]] = acc.tanh();
                }
            }
        }
        out
    }
}

impl FeatureExtractor for SeededConvExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn canonical_size(&self) -> (usize, usize) {
        self.canonical
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<Array3<f32>>> {
        let (h, w) = self.canonical;
        let resized = image.resize_bilinear(h, w);
        let mut current = resized.data().clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let pooled = Self::blur_and_pool(&current);
            current = Self::project(stage, &pooled);
            out.push(current.clone());
        }
        Ok(out)
    }
}

/// One downloadable extractor asset: where to fetch it and the content hash
/// the file must match.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssetEntry {
    pub url: String,
    pub sha256: String,
}

/// Extractor name -> asset record, stored as a TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssetManifest {
    #[serde(default)]
    pub assets: BTreeMap<String, AssetEntry>,
}

impl AssetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Manifest(format!("asset manifest: {e}")))
    }

    pub fn verify_file(&self, name: &str, path: impl AsRef<Path>) -> Result<()> {
        use sha2::{Digest, Sha256};
        let entry = self
            .assets
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("no asset entry for `{name}`")))?;
        let bytes = std::fs::read(path.as_ref())?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != entry.sha256.to_lowercase() {
            return Err(Error::Manifest(format!(
                "asset `{name}` hash mismatch: expected {}, got {digest}",
                entry.sha256
            )));
        }
        Ok(())
    }
}

/// Resolve an extractor by name. Built-in names need no assets; anything
/// else must appear in the asset manifest and be fetched out of band.
pub fn resolve_extractor(name: &str, manifest: Option<&AssetManifest>) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "builtin-perceptual-v1" => Ok(Box::new(SeededConvExtractor::builtin())),
        other => {
            if let Some(m) = manifest {
                if m.assets.contains_key(other) {
                    return Err(Error::Checkpoint(format!(
                        "extractor `{other}` is declared in the asset manifest but no loader is registered for it; \
                         fetch the asset and register a loader, or use `builtin-perceptual-v1`"
                    )));
                }
            }
            Err(Error::Config(format!("unknown extractor `{other}`")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_is_deterministic() {
        let ex = SeededConvExtractor::builtin();
        let mut img = RgbImage::zeros(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                img.data_mut()[[0, y, x]] = (x as f32) / 64.0;
                img.data_mut()[[1, y, x]] = (y as f32) / 64.0;
            }
        }
        let a = ex.extract(&img).unwrap();
        let b = ex.extract(&img).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn layer_shapes_match_specs() {
        let ex = SeededConvExtractor::builtin();
        let img = RgbImage::zeros(64, 64);
        let feats = ex.extract(&img).unwrap();
        assert_eq!(feats.len(), ex.layers().len());
        for (f, spec) in feats.iter().zip(ex.layers()) {
            let (c, h, w) = f.dim();
            assert_eq!(c, spec.channels);
            assert_eq!(h, 64 / spec.downsample);
            assert_eq!(w, 64 / spec.downsample);
        }
    }

    #[test]
    fn pooled_embedding_has_deepest_layer_width() {
        let ex = SeededConvExtractor::builtin();
        let img = RgbImage::zeros(32, 48);
        let emb = ex.pooled_embedding(&img).unwrap();
        assert_eq!(emb.len(), ex.layers().last().unwrap().channels);
    }

    #[test]
    fn unknown_extractor_is_a_config_error() {
        assert!(resolve_extractor("vgg19-imagenet", None).is_err());
    }
}
