//! Deterministic synthetic latent-diffusion checkpoint.
//!
//! A small fixed-weight U-Net-shaped model: three decoder up-blocks at
//! increasing resolution, each with one single-head self-attention block.
//! Weights are drawn once from a seeded generator, so two processes loading
//! the same checkpoint id observe bitwise-identical behavior. The model is
//! smooth and its noise prediction is bounded, which keeps DDIM inversion
//! accurately invertible.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::injection::attention_weights;

use super::hooks::{AttnSite, HookSet};
use super::{Backbone, BlockInfo, CheckpointInfo, LatentTensor};

const LATENT_CHANNELS: usize = 4;
const DOWNSAMPLE: usize = 8;
// Pooled latent + blur + horizontal/vertical gradients.
const STEM_CHANNELS: usize = 4 * LATENT_CHANNELS;
const EPS_SCALE: f32 = 0.15;

struct BlockWeights {
    stem: Array2<f32>,     // (channels, STEM_CHANNELS)
    time: Array2<f32>,     // (channels, 4)
    bias: Array1<f32>,     // (channels,)
    wq: Array2<f32>,       // (channels, channels)
    wk: Array2<f32>,
    wv: Array2<f32>,
    out: Array2<f32>,      // (LATENT_CHANNELS, channels)
}

pub struct SyntheticBackbone {
    info: CheckpointInfo,
    weights: Vec<BlockWeights>,
}

fn seeded_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f32 = rng.sample(StandardNormal);
        v * scale
    })
}

impl SyntheticBackbone {
    pub fn new(id: &str, seed: u64) -> Self {
        let plan = [("up.0", 48usize, 4usize), ("up.1", 32, 2), ("up.2", 16, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut weights = Vec::new();
        for (bid, channels, scale) in plan {
            blocks.push(BlockInfo {
                id: bid.to_string(),
                channels,
                scale,
            });
            weights.push(BlockWeights {
                stem: seeded_matrix(&mut rng, channels, STEM_CHANNELS, 1.0 / (STEM_CHANNELS as f32).sqrt()),
                time: seeded_matrix(&mut rng, channels, 4, 0.1),
                bias: Array1::from_shape_fn(channels, |_| {
                    let v: f32 = rng.sample(StandardNormal);
                    v * 0.05
                }),
                wq: seeded_matrix(&mut rng, channels, channels, 1.0 / (channels as f32).sqrt()),
                wk: seeded_matrix(&mut rng, channels, channels, 1.0 / (channels as f32).sqrt()),
                wv: seeded_matrix(&mut rng, channels, channels, 1.0 / (channels as f32).sqrt()),
                out: seeded_matrix(&mut rng, LATENT_CHANNELS, channels, 1.0 / (channels as f32).sqrt()),
            });
        }
        Self {
            info: CheckpointInfo {
                id: id.to_string(),
                latent_channels: LATENT_CHANNELS,
                downsample_factor: DOWNSAMPLE,
                blocks,
            },
            weights,
        }
    }
}

fn avg_pool(input: &Array3<f32>, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return input.clone();
    }
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array3::zeros((c, oh, ow));
    let norm = (factor * factor) as f32;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += input[[ch, y * factor + dy, x * factor + dx]];
                    }
                }
                out[[ch, y, x]] = acc / norm;
            }
        }
    }
    out
}

fn blur3(input: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = input.dim();
    let k = [[1.0f32, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let mut out = Array3::zeros((c, h, w));
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
                out[[ch, y, x]] = acc / 16.0;
            }
        }
    }
    out
}

fn gradients(input: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
    let (c, h, w) = input.dim();
    let mut gx = Array3::zeros((c, h, w));
    let mut gy = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let xr = (x + 1).min(w - 1);
                let xl = x.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                let yu = y.saturating_sub(1);
                gx[[ch, y, x]] = 0.5 * (input[[ch, y, xr]] - input[[ch, y, xl]]);
                gy[[ch, y, x]] = 0.5 * (input[[ch, yd, x]] - input[[ch, yu, x]]);
            }
        }
    }
    (gx, gy)
}

fn upsample_nearest(input: &Array3<f32>, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return input.clone();
    }
    let (c, h, w) = input.dim();
    let mut out = Array3::zeros((c, h * factor, w * factor));
    for ch in 0..c {
        for y in 0..h * factor {
            for x in 0..w * factor {
                out[[ch, y, x]] = input[[ch, y / factor, x / factor]];
            }
        }
    }
    out
}

impl Backbone for SyntheticBackbone {
    fn info(&self) -> &CheckpointInfo {
        &self.info
    }

    fn encode(&self, image: &RgbImage) -> Result<LatentTensor> {
        let (h, w) = (image.height(), image.width());
        // Grids of every up-block must be non-empty and exact.
        let granularity = DOWNSAMPLE * self.info.blocks.iter().map(|b| b.scale).max().unwrap_or(1);
        if h % granularity != 0 || w % granularity != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "encode",
                format!("dimensions divisible by {granularity}"),
                format!("{h}x{w}"),
            ));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("encode: pixel values must lie in [0, 1]".into()));
        }
        let (lh, lw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let mut data = Array3::zeros((LATENT_CHANNELS, lh, lw));
        let lum = image.luminance();
        for y in 0..lh {
            for x in 0..lw {
                let mut sums = [0.0f32; 4];
                for dy in 0..DOWNSAMPLE {
                    for dx in 0..DOWNSAMPLE {
                        let (sy, sx) = (y * DOWNSAMPLE + dy, x * DOWNSAMPLE + dx);
                        for c in 0..3 {
                            sums[c] += image.data()[[c, sy, sx]];
                        }
                        sums[3] += lum[[sy, sx]];
                    }
                }
                let norm = (DOWNSAMPLE * DOWNSAMPLE) as f32;
                for c in 0..LATENT_CHANNELS {
                    data[[c, y, x]] = 2.0 * (sums[c] / norm - 0.5);
                }
            }
        }
        let latent = LatentTensor {
            data,
            image_size: (h, w),
        };
        latent.check_finite("encode", 0)?;
        Ok(latent)
    }

    fn decode(&self, latent: &LatentTensor) -> Result<RgbImage> {
        let (c, lh, lw) = latent.data.dim();
        if c != LATENT_CHANNELS {
            return Err(Error::shape("decode", format!("{LATENT_CHANNELS} channels"), format!("{c}")));
        }
        let (h, w) = latent.image_size;
        if lh * DOWNSAMPLE != h || lw * DOWNSAMPLE != w {
            return Err(Error::shape(
                "decode",
                format!("latent {}x{} for image {h}x{w}", h / DOWNSAMPLE, w / DOWNSAMPLE),
                format!("{lh}x{lw}"),
            ));
        }
        latent.check_finite("decode", 0)?;
        // Bilinear upsample of the color channels back to pixel space.
        let mut small = RgbImage::zeros(lh, lw);
        for ch in 0..3 {
            for y in 0..lh {
                for x in 0..lw {
                    small.data_mut()[[ch, y, x]] = latent.data[[ch, y, x]] / 2.0 + 0.5;
                }
            }
        }
        Ok(small.resize_bilinear(h, w).clamp_unit())
    }

    fn predict_noise(
        &self,
        latent: &LatentTensor,
        timestep: usize,
        site_step: usize,
        hooks: &mut HookSet<'_>,
    ) -> Result<Array3<f32>> {
        let (c, h, w) = latent.data.dim();
        if c != LATENT_CHANNELS {
            return Err(Error::shape("predict_noise", format!("{LATENT_CHANNELS} channels"), format!("{c}")));
        }
        latent.check_finite("predict_noise input", timestep)?;

        let t = timestep as f32;
        let temb = [
            (0.2 * t).sin(),
            (0.2 * t).cos(),
            (0.05 * t).sin(),
            (0.05 * t).cos(),
        ];

        let mut eps_acc = Array3::<f32>::zeros((LATENT_CHANNELS, h, w));
        for (block, bw) in self.info.blocks.iter().zip(&self.weights) {
            if h % block.scale != 0 || w % block.scale != 0 {
                return Err(Error::shape(
                    format!("predict_noise block {}", block.id),
                    format!("latent divisible by {}", block.scale),
                    format!("{h}x{w}"),
                ));
            }
            let pooled = avg_pool(&latent.data, block.scale);
            let blurred = blur3(&pooled);
            let (gx, gy) = gradients(&pooled);
            let (bh, bw_) = (pooled.dim().1, pooled.dim().2);
            let tokens = bh * bw_;

            // Stem: fixed projection of [pooled, blur, gx, gy] plus a time
            // embedding term, squashed by tanh.
            let mut feat = Array3::<f32>::zeros((block.channels, bh, bw_));
            for y in 0..bh {
                for x in 0..bw_ {
                    for o in 0..block.channels {
                        let mut acc = bw.bias[o];
                        for i in 0..LATENT_CHANNELS {
                            acc += bw.stem[[o, i]] * pooled[[i, y, x]];
                            acc += bw.stem[[o, LATENT_CHANNELS + i]] * blurred[[i, y, x]];
                            acc += bw.stem[[o, 2 * LATENT_CHANNELS + i]] * gx[[i, y, x]];
                            acc += bw.stem[[o, 3 * LATENT_CHANNELS + i]] * gy[[i, y, x]];
                        }
                        for (j, te) in temb.iter().enumerate() {
                            acc += bw.time[[o, j]] * te;
                        }
                        feat[[o, y, x]] = acc.tanh();
                    }
                }
            }

            let site = AttnSite {
                block: block.id.clone(),
                timestep,
                step_index: site_step,
            };
            hooks.dispatch_features(&site, &feat)?;

            // Tokens are spatial locations, row-major.
            let mut feat_tokens = Array2::<f32>::zeros((tokens, block.channels));
            for y in 0..bh {
                for x in 0..bw_ {
                    for o in 0..block.channels {
                        feat_tokens[[y * bw_ + x, o]] = feat[[o, y, x]];
                    }
                }
            }
            let q = feat_tokens.dot(&bw.wq.t());
            let mut k = feat_tokens.dot(&bw.wk.t());
            let mut v = feat_tokens.dot(&bw.wv.t());
            hooks.dispatch_qkv(&site, &q, &mut k, &mut v)?;
            let gamma = hooks.temperature(&site);
            if gamma <= 0.0 {
                return Err(Error::Config(format!("attention temperature must be > 0, got {gamma}")));
            }
            let scale = (1.0 / (gamma * (block.channels as f64).sqrt())) as f32;
            let attn_tokens = attention_weights(&q, &k, scale).dot(&v);

            let mut attn = Array3::<f32>::zeros((block.channels, bh, bw_));
            for y in 0..bh {
                for x in 0..bw_ {
                    for o in 0..block.channels {
                        attn[[o, y, x]] = attn_tokens[[y * bw_ + x, o]];
                    }
                }
            }
            hooks.dispatch_attention_output(&site, &mut attn)?;

            // Residual merge, projection back to latent channels, then
            // upsample to the latent grid.
            let mut eps_b = Array3::<f32>::zeros((LATENT_CHANNELS, bh, bw_));
            for y in 0..bh {
                for x in 0..bw_ {
                    for o in 0..LATENT_CHANNELS {
                        let mut acc = 0.0;
                        for i in 0..block.channels {
                            acc += bw.out[[o, i]] * (feat[[i, y, x]] + attn[[i, y, x]]);
                        }
                        eps_b[[o, y, x]] = acc;
                    }
                }
            }
            eps_acc = eps_acc + upsample_nearest(&eps_b, block.scale);
        }

        let n = self.info.blocks.len() as f32;
        let eps = eps_acc.mapv(|v| EPS_SCALE * (v / n).tanh());
        if !eps.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "predict_noise output".into(),
                timestep,
            });
        }
        Ok(eps)
    }
}
