//! Cycle-consistent adaptive refinement: reverse stylization, dense
//! re-matching, AdaIN tone harmonization, correspondence-weighted injection
//! during sampling, and loss-gated adaptive stopping.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::features::extract_features_from_latent;
use crate::backbone::hooks::{
    AttentionHook, AttentionOutputCaptureHook, AttnSite, HookSet, KvCaptureHook, KvSwapHook,
};
use crate::backbone::{
    ddim_invert, ddim_sample, Backbone, DiffusionSchedule, FeatureLocator, LatentTensor,
};
use crate::correspondence::{dense_match, CorrespondenceMap};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::injection::{inject_correspondence, injection_active, InjectionConfig};
use crate::losses::{content_loss, style_loss};
use crate::metrics::extractor::FeatureExtractor;

/// Guard against division by zero on constant channels.
const ADAIN_EPS: f64 = 1e-12;

/// How the stopping rule compares losses to thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparatorMode {
    /// Stop when `L_content > tau_c` and `L_style < tau_s`.
    PaperAsWritten,
    /// Stop when `L_content < tau_c` and `L_style < tau_s`.
    Conventional,
}

impl FromStr for ComparatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-as-written" => Ok(Self::PaperAsWritten),
            "conventional" => Ok(Self::Conventional),
            other => Err(Error::Config(format!(
                "unknown comparator `{other}` (expected `paper-as-written` or `conventional`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxIters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleConfig {
    /// Content-loss threshold tau_c.
    pub tau_c: f64,
    /// Style-loss threshold tau_s.
    pub tau_s: f64,
    /// Maximum refinement iterations Z.
    pub max_iters: usize,
    pub comparator: ComparatorMode,
    /// Apply AdaIN tone harmonization to the starting latent of each pass.
    pub adain: bool,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            tau_c: 0.1,
            tau_s: 0.1,
            max_iters: 5,
            comparator: ComparatorMode::PaperAsWritten,
            adain: true,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("cycle.max_iters must be >= 1".into()));
        }
        for (name, v) in [("cycle.tau_c", self.tau_c), ("cycle.tau_s", self.tau_s)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One Stage B iteration's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub z: usize,
    pub l_content: f64,
    pub l_style: f64,
}

/// Final state of a refinement run, emitted as a structured sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleState {
    /// Iteration the run stopped at (1-based).
    pub z: usize,
    pub l_content: f64,
    pub l_style: f64,
    pub stop_reason: StopReason,
    pub history: Vec<CycleRecord>,
}

/// Channel-wise AdaIN (Eq. for tone harmonization): re-statisticize `y_c`
/// to `y_s`'s per-channel mean and standard deviation. Constant channels of
/// `y_c` map to `mu(y_s)` everywhere.
pub fn adain(y_c: &LatentTensor, y_s: &LatentTensor) -> Result<LatentTensor> {
    let (cc, ch, cw) = y_c.data.dim();
    let (sc, ..) = y_s.data.dim();
    if cc != sc {
        return Err(Error::shape("adain: channels", format!("{cc}"), format!("{sc}")));
    }
    let stats = |data: &Array3<f32>, c: usize| -> (f64, f64) {
        let ch_view = data.index_axis(ndarray::Axis(0), c);
        let n = ch_view.len() as f64;
        let mean = ch_view.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch_view
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    };
    let mut out = y_c.data.clone();
    for c in 0..cc {
        let (mu_c, sigma_c) = stats(&y_c.data, c);
        let (mu_s, sigma_s) = stats(&y_s.data, c);
        let mut ch_view = out.index_axis_mut(ndarray::Axis(0), c);
        if sigma_c <= ADAIN_EPS {
            ch_view.fill(mu_s as f32);
        } else {
            for v in ch_view.iter_mut() {
                *v = (sigma_s * ((*v as f64 - mu_c) / sigma_c) + mu_s) as f32;
            }
        }
    }
    let result = LatentTensor {
        data: out,
        image_size: y_c.image_size,
    };
    result.check_finite("adain output", 0)?;
    let _ = (ch, cw);
    Ok(result)
}

/// Adaptive stopping decision for iteration `z` (1-based). Hitting the
/// iteration cap always stops, reported as `max_iters` regardless of the
/// loss values.
pub fn should_stop(
    l_content: f64,
    l_style: f64,
    config: &CycleConfig,
    z: usize,
) -> (bool, Option<StopReason>) {
    if z >= config.max_iters {
        return (true, Some(StopReason::MaxIters));
    }
    let hit = match config.comparator {
        ComparatorMode::PaperAsWritten => l_content > config.tau_c && l_style < config.tau_s,
        ComparatorMode::Conventional => l_content < config.tau_c && l_style < config.tau_s,
    };
    if hit {
        (true, Some(StopReason::Threshold))
    } else {
        (false, None)
    }
}

/// K/V of the given blocks at every timestep of an inversion trajectory:
/// one standalone forward pass per timestep.
pub fn capture_kv_stream(
    backbone: &dyn Backbone,
    trajectory: &[LatentTensor],
    blocks: &[String],
) -> Result<BTreeMap<(usize, String), (Array2<f32>, Array2<f32>)>> {
    let mut capture = KvCaptureHook::new(blocks.to_vec());
    for (t, latent) in trajectory.iter().enumerate().skip(1) {
        let mut hooks = HookSet::new();
        hooks.push(&mut capture);
        hooks.validate(backbone.info())?;
        backbone.predict_noise(latent, t, 0, &mut hooks)?;
    }
    Ok(capture.captured)
}

/// Attention outputs of the given blocks at every timestep of a trajectory.
pub fn capture_attention_stream(
    backbone: &dyn Backbone,
    trajectory: &[LatentTensor],
    blocks: &[String],
) -> Result<BTreeMap<(usize, String), Array3<f32>>> {
    let mut capture = AttentionOutputCaptureHook::new(blocks.to_vec());
    for (t, latent) in trajectory.iter().enumerate().skip(1) {
        let mut hooks = HookSet::new();
        hooks.push(&mut capture);
        hooks.validate(backbone.info())?;
        backbone.predict_noise(latent, t, 0, &mut hooks)?;
    }
    Ok(capture.captured)
}

/// Adds the correspondence-weighted style-attention term to the attention
/// output of the targeted blocks once injection activates:
/// `out[k][p_c] += w * attn[k][map(p_c)]`.
pub struct CorrespondenceInjectionHook {
    config: InjectionConfig,
    /// (timestep, block) -> attention output of the stylized-content stream.
    sources: BTreeMap<(usize, String), Array3<f32>>,
    map: CorrespondenceMap,
}

impl CorrespondenceInjectionHook {
    pub fn new(
        config: InjectionConfig,
        sources: BTreeMap<(usize, String), Array3<f32>>,
        map: CorrespondenceMap,
    ) -> Self {
        Self {
            config,
            sources,
            map,
        }
    }
}

impl AttentionHook for CorrespondenceInjectionHook {
    fn blocks(&self) -> Vec<String> {
        self.config.target_blocks.clone()
    }

    fn on_attention_output(&mut self, site: &AttnSite, output: &mut Array3<f32>) -> Result<()> {
        if !injection_active(site.step_index, &self.config) {
            return Ok(());
        }
        let Some(attn) = self.sources.get(&(site.timestep, site.block.clone())) else {
            return Ok(());
        };
        let (_, h, w) = output.dim();
        let map = self.map.rescale_sources((h, w));
        let injected = inject_correspondence(
            output,
            attn,
            &map,
            self.config.w,
            self.config.score_modulated,
        )?;
        output.assign(&injected);
        Ok(())
    }
}

/// Stage A reverse stylization: make the style image adopt the content
/// image's features by sampling the style image's inverted latent with K/V
/// swapped in from the content image's trajectory (`Attn(Q_s, K_c, V_c)`).
pub fn reverse_stylize(
    backbone: &dyn Backbone,
    i_c: &RgbImage,
    i_s: &RgbImage,
    schedule: &DiffusionSchedule,
    injection: &InjectionConfig,
) -> Result<RgbImage> {
    let lat_c = backbone.encode(i_c)?;
    let lat_s = backbone.encode(i_s)?;
    let traj_c = ddim_invert(backbone, &lat_c, schedule)?;
    let traj_s = ddim_invert(backbone, &lat_s, schedule)?;
    let stream_c = capture_kv_stream(backbone, &traj_c, &injection.target_blocks)?;
    let mut swap = KvSwapHook::new(injection.target_blocks.clone(), stream_c, injection.gamma);
    let mut hooks = HookSet::new();
    hooks.push(&mut swap);
    let out = ddim_sample(backbone, traj_s.last().unwrap(), schedule, &mut hooks)?;
    backbone.decode(&out)
}

fn gram_features(
    extractor: &dyn FeatureExtractor,
    image: &RgbImage,
    style_layers: &[String],
) -> Result<Vec<Array3<f32>>> {
    let feats = extractor.extract(image)?;
    if style_layers.is_empty() {
        return Ok(feats);
    }
    let mut picked = Vec::with_capacity(style_layers.len());
    for name in style_layers {
        let idx = extractor
            .layers()
            .iter()
            .position(|l| &l.name == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "losses.style_layers: extractor `{}` has no layer `{name}`",
                    extractor.id()
                ))
            })?;
        picked.push(feats[idx].clone());
    }
    Ok(picked)
}

/// Full refinement loop: Stage A (reverse stylization + dense matching at
/// the selected feature space) once, then up to `cycle.max_iters` Stage B
/// passes of AdaIN, KV-swap sampling with correspondence injection, and
/// loss-gated stopping. Iteration z+1 refines iteration z's output by
/// re-inverting it as the next starting latent.
#[allow(clippy::too_many_arguments)]
pub fn run_cycle(
    backbone: &dyn Backbone,
    i_c: &RgbImage,
    i_s: &RgbImage,
    locator: &FeatureLocator,
    schedule: &DiffusionSchedule,
    injection: &InjectionConfig,
    cycle: &CycleConfig,
    style_layers: &[String],
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<(RgbImage, CycleState)> {
    cycle.validate()?;
    injection.validate(schedule.total_steps())?;

    // Stage A: reverse stylization and correspondence mining.
    let stage_a = |e: Error| e.in_stage("stage-a", 0);
    let lat_c = backbone.encode(i_c).map_err(stage_a)?;
    let lat_s = backbone.encode(i_s).map_err(stage_a)?;
    let traj_c = ddim_invert(backbone, &lat_c, schedule).map_err(stage_a)?;
    let traj_s = ddim_invert(backbone, &lat_s, schedule).map_err(stage_a)?;

    let stream_c = capture_kv_stream(backbone, &traj_c, &injection.target_blocks).map_err(stage_a)?;
    let i_sty_c = {
        let mut swap =
            KvSwapHook::new(injection.target_blocks.clone(), stream_c, injection.gamma);
        let mut hooks = HookSet::new();
        hooks.push(&mut swap);
        let out =
            ddim_sample(backbone, traj_s.last().unwrap(), schedule, &mut hooks).map_err(stage_a)?;
        backbone.decode(&out).map_err(stage_a)?
    };

    let f_c = extract_features_from_latent(backbone, &lat_c, locator, schedule, seed, "content")
        .map_err(stage_a)?;
    let lat_sty_c = backbone.encode(&i_sty_c).map_err(stage_a)?;
    let f_sty_c =
        extract_features_from_latent(backbone, &lat_sty_c, locator, schedule, seed, "sty_c")
            .map_err(stage_a)?;
    let map = dense_match(&f_c, &f_sty_c).map_err(stage_a)?;

    // Streams consumed by Stage B sampling: style K/V for the swap, and the
    // stylized-content attention outputs for correspondence injection.
    let stream_s = capture_kv_stream(backbone, &traj_s, &injection.target_blocks).map_err(stage_a)?;
    let traj_sty_c = ddim_invert(backbone, &lat_sty_c, schedule).map_err(stage_a)?;
    let attn_stream = capture_attention_stream(backbone, &traj_sty_c, &injection.target_blocks)
        .map_err(stage_a)?;

    let style_grams = gram_features(extractor, i_s, style_layers).map_err(stage_a)?;
    let content_lum = i_c.luminance();

    // Stage B: fitting & control.
    let mut current_traj = traj_c;
    let mut history = Vec::new();
    let mut best: Option<(RgbImage, StopReason)> = None;
    for z in 1..=cycle.max_iters {
        let stage_b = |e: Error| e.in_stage("stage-b", z);
        let mut start = current_traj.last().unwrap().clone();
        if cycle.adain {
            start = adain(&start, traj_s.last().unwrap()).map_err(stage_b)?;
        }
        let out_latent = {
            let mut swap = KvSwapHook::new(
                injection.target_blocks.clone(),
                stream_s.clone(),
                injection.gamma,
            );
            let mut inject = CorrespondenceInjectionHook::new(
                injection.clone(),
                attn_stream.clone(),
                map.clone(),
            );
            let mut hooks = HookSet::new();
            hooks.push(&mut swap);
            hooks.push(&mut inject);
            ddim_sample(backbone, &start, schedule, &mut hooks).map_err(stage_b)?
        };
        let i_gen = backbone.decode(&out_latent).map_err(stage_b)?;

        let l_content = content_loss(&i_gen.luminance(), &content_lum).map_err(stage_b)?;
        let gen_grams = gram_features(extractor, &i_gen, style_layers).map_err(stage_b)?;
        let l_style = style_loss(&gen_grams, &style_grams, true).map_err(stage_b)?;
        history.push(CycleRecord {
            z,
            l_content,
            l_style,
        });

        let (stop, reason) = should_stop(l_content, l_style, cycle, z);
        if stop {
            best = Some((i_gen, reason.unwrap()));
            break;
        }
        // Next iteration refines this output: re-invert it as the new
        // content-side trajectory.
        current_traj = ddim_invert(backbone, &backbone.encode(&i_gen).map_err(stage_b)?, schedule)
            .map_err(stage_b)?;
    }
    let (image, stop_reason) = best.expect("loop always stops by max_iters");
    let last = history.last().unwrap().clone();
    Ok((
        image,
        CycleState {
            z: last.z,
            l_content: last.l_content,
            l_style: last.l_style,
            stop_reason,
            history,
        },
    ))
}

/// Calibrate (tau_c, tau_s) for a style: run the cycle once for the full
/// 5 iterations on a calibration pair and freeze the z=3 loss values.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_thresholds(
    backbone: &dyn Backbone,
    i_c: &RgbImage,
    i_s: &RgbImage,
    locator: &FeatureLocator,
    schedule: &DiffusionSchedule,
    injection: &InjectionConfig,
    base: &CycleConfig,
    style_layers: &[String],
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut cfg = base.clone();
    cfg.max_iters = 5;
    // Zero thresholds under the conventional comparator never trigger
    // (losses are >= 0, comparisons strict), so all 5 iterations run.
    cfg.tau_c = 0.0;
    cfg.tau_s = 0.0;
    cfg.comparator = ComparatorMode::Conventional;
    let (_, state) = run_cycle(
        backbone,
        i_c,
        i_s,
        locator,
        schedule,
        injection,
        &cfg,
        style_layers,
        extractor,
        seed,
    )?;
    let rec = state
        .history
        .get(2)
        .ok_or_else(|| Error::Numerical("calibration run produced fewer than 3 iterations".into()))?;
    Ok((rec.l_content, rec.l_style))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SyntheticBackbone;
    use crate::metrics::extractor::SeededConvExtractor;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn latent_from(data: Array3<f32>) -> LatentTensor {
        LatentTensor {
            data,
            image_size: (64, 64),
        }
    }

    #[test]
    fn adain_matches_style_statistics_on_random_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xada1);
        for _ in 0..50 {
            let y_c = latent_from(Array3::from_shape_fn((4, 8, 8), |_| {
                rng.gen::<f32>() * 4.0 - 2.0
            }));
            let y_s = latent_from(Array3::from_shape_fn((4, 8, 8), |_| {
                rng.gen::<f32>() * 6.0 - 1.0
            }));
            let out = adain(&y_c, &y_s).unwrap();
            for c in 0..4 {
                let sv = y_s.data.index_axis(ndarray::Axis(0), c);
                let ov = out.data.index_axis(ndarray::Axis(0), c);
                let n = sv.len() as f64;
                let mu_s = sv.iter().map(|&v| v as f64).sum::<f64>() / n;
                let mu_o = ov.iter().map(|&v| v as f64).sum::<f64>() / n;
                let sd = |view: ndarray::ArrayView2<f32>, mu: f64| {
                    (view.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n).sqrt()
                };
                assert!((mu_o - mu_s).abs() < 1e-5, "mean off by {}", (mu_o - mu_s).abs());
                assert!((sd(ov, mu_o) - sd(sv, mu_s)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn adain_identity_and_sigma_zero_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = latent_from(Array3::from_shape_fn((2, 4, 4), |_| rng.gen::<f32>()));
        let out = adain(&y, &y).unwrap();
        for (a, b) in out.data.iter().zip(y.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Constant content channel: output must equal the style mean with no
        // non-finite values.
        let mut flat = y.clone();
        flat.data.index_axis_mut(ndarray::Axis(0), 0).fill(0.25);
        let out = adain(&flat, &y).unwrap();
        assert!(out.data.iter().all(|v| v.is_finite()));
        let style_mu: f32 = y.data.index_axis(ndarray::Axis(0), 0).mean().unwrap();
        for v in out.data.index_axis(ndarray::Axis(0), 0) {
            assert!((v - style_mu).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let a = latent_from(Array3::zeros((2, 4, 4)));
        let b = latent_from(Array3::zeros((3, 4, 4)));
        assert!(adain(&a, &b).is_err());
    }

    #[test]
    fn should_stop_truth_table() {
        let cfg = CycleConfig {
            tau_c: 1.0,
            tau_s: 1.0,
            max_iters: 5,
            comparator: ComparatorMode::PaperAsWritten,
            adain: true,
        };
        // Paper-as-written: L_c > tau_c AND L_s < tau_s.
        assert_eq!(should_stop(2.0, 0.5, &cfg, 1), (true, Some(StopReason::Threshold)));
        assert_eq!(should_stop(0.5, 0.5, &cfg, 1), (false, None));
        assert_eq!(should_stop(2.0, 2.0, &cfg, 1), (false, None));
        // Boundary: equality does not trigger (strict inequalities).
        assert_eq!(should_stop(1.0, 0.5, &cfg, 1), (false, None));
        assert_eq!(should_stop(2.0, 1.0, &cfg, 1), (false, None));
        // z == Z stops regardless of losses.
        assert_eq!(should_stop(0.0, 9.0, &cfg, 5), (true, Some(StopReason::MaxIters)));

        let conv = CycleConfig {
            comparator: ComparatorMode::Conventional,
            ..cfg
        };
        assert_eq!(should_stop(0.5, 0.5, &conv, 1), (true, Some(StopReason::Threshold)));
        assert_eq!(should_stop(2.0, 0.5, &conv, 1), (false, None));
        assert_eq!(should_stop(0.5, 2.0, &conv, 1), (false, None));
    }

    #[test]
    fn comparator_parsing() {
        assert_eq!(
            "paper-as-written".parse::<ComparatorMode>().unwrap(),
            ComparatorMode::PaperAsWritten
        );
        assert_eq!(
            "conventional".parse::<ComparatorMode>().unwrap(),
            ComparatorMode::Conventional
        );
        assert!("strict".parse::<ComparatorMode>().is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = CycleConfig::default();
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = CycleConfig::default();
        cfg.tau_c = f64::NAN;
        assert!(cfg.validate().is_err());
        let mut cfg = CycleConfig::default();
        cfg.tau_s = -1.0;
        assert!(cfg.validate().is_err());
        assert!(CycleConfig::default().validate().is_ok());
    }

    fn gradient_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let mut img = RgbImage::zeros(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                img.data_mut()[[0, y, x]] = (base[0] * 0.5 + x as f32 / 127.0).clamp(0.0, 1.0);
                img.data_mut()[[1, y, x]] = (base[1] * 0.5 + y as f32 / 127.0).clamp(0.0, 1.0);
                img.data_mut()[[2, y, x]] =
                    (base[2] * 0.5 + (x + y) as f32 / 255.0).clamp(0.0, 1.0);
            }
        }
        img
    }

    fn small_setup() -> (SyntheticBackbone, DiffusionSchedule, FeatureLocator) {
        (
            SyntheticBackbone::new("synthetic-v1", 1),
            DiffusionSchedule::default_for_steps(6).unwrap(),
            FeatureLocator {
                timestep: 3,
                layer: "up.2".into(),
            },
        )
    }

    fn small_injection() -> InjectionConfig {
        InjectionConfig {
            start_step: 5,
            ..InjectionConfig::default()
        }
    }

    #[test]
    fn reverse_stylize_self_pair_reconstructs() {
        let (bb, schedule, _) = small_setup();
        let img = gradient_image(3);
        let out = reverse_stylize(&bb, &img, &img, &schedule, &small_injection()).unwrap();
        assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        let mad = (out.data() - img.data()).mapv(f32::abs).mean().unwrap();
        assert!(mad < 0.05, "self-pair reverse stylization deviates by {mad}");
        // Determinism.
        let again = reverse_stylize(&bb, &img, &img, &schedule, &small_injection()).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn run_cycle_histories_are_reproducible_and_monotone() {
        let (bb, schedule, locator) = small_setup();
        let extractor = SeededConvExtractor::builtin();
        let (i_c, i_s) = (gradient_image(10), gradient_image(20));
        let cfg = CycleConfig {
            max_iters: 3,
            tau_c: 0.0,
            tau_s: 0.0,
            comparator: ComparatorMode::Conventional,
            adain: true,
        };
        let run = || {
            run_cycle(
                &bb,
                &i_c,
                &i_s,
                &locator,
                &schedule,
                &small_injection(),
                &cfg,
                &[],
                &extractor,
                11,
            )
            .unwrap()
        };
        let (img_a, state_a) = run();
        let (img_b, state_b) = run();
        assert_eq!(img_a.data(), img_b.data());
        assert_eq!(state_a, state_b);
        // Unsatisfiable thresholds ran the loop to the cap.
        assert_eq!(state_a.z, 3);
        assert_eq!(state_a.stop_reason, StopReason::MaxIters);
        assert_eq!(state_a.history.len(), state_a.z);
        for (i, rec) in state_a.history.iter().enumerate() {
            assert_eq!(rec.z, i + 1);
            assert!(rec.l_content.is_finite() && rec.l_style.is_finite());
        }
    }

    #[test]
    fn permissive_thresholds_stop_after_one_iteration() {
        let (bb, schedule, locator) = small_setup();
        let extractor = SeededConvExtractor::builtin();
        let (i_c, i_s) = (gradient_image(10), gradient_image(20));
        let cfg = CycleConfig {
            max_iters: 5,
            tau_c: f64::MAX,
            tau_s: f64::MAX,
            comparator: ComparatorMode::Conventional,
            adain: true,
        };
        let (_, state) = run_cycle(
            &bb,
            &i_c,
            &i_s,
            &locator,
            &schedule,
            &small_injection(),
            &cfg,
            &[],
            &extractor,
            11,
        )
        .unwrap();
        assert_eq!(state.z, 1);
        assert_eq!(state.stop_reason, StopReason::Threshold);
        assert_eq!(state.history.len(), 1);
    }

    #[test]
    fn disabled_injection_and_adain_reduce_to_plain_kv_swap() {
        let (bb, schedule, locator) = small_setup();
        let extractor = SeededConvExtractor::builtin();
        let (i_c, i_s) = (gradient_image(10), gradient_image(20));
        let mut injection = small_injection();
        injection.w = 0.0;
        let cfg = CycleConfig {
            max_iters: 1,
            adain: false,
            ..CycleConfig::default()
        };
        let (cycled, _) = run_cycle(
            &bb,
            &i_c,
            &i_s,
            &locator,
            &schedule,
            &injection,
            &cfg,
            &[],
            &extractor,
            11,
        )
        .unwrap();

        // Plain KV-swap stylization: sample content's inverted latent with
        // K/V from the style trajectory.
        let lat_c = bb.encode(&i_c).unwrap();
        let lat_s = bb.encode(&i_s).unwrap();
        let traj_c = ddim_invert(&bb, &lat_c, &schedule).unwrap();
        let traj_s = ddim_invert(&bb, &lat_s, &schedule).unwrap();
        let stream_s = capture_kv_stream(&bb, &traj_s, &injection.target_blocks).unwrap();
        let mut swap = KvSwapHook::new(injection.target_blocks.clone(), stream_s, injection.gamma);
        let mut hooks = HookSet::new();
        hooks.push(&mut swap);
        let plain = ddim_sample(&bb, traj_c.last().unwrap(), &schedule, &mut hooks).unwrap();
        let plain_img = bb.decode(&plain).unwrap();
        assert_eq!(cycled.data(), plain_img.data());
    }

    #[test]
    fn stage_failures_carry_stage_and_iteration() {
        let (bb, schedule, _) = small_setup();
        let extractor = SeededConvExtractor::builtin();
        let bad_locator = FeatureLocator {
            timestep: 999,
            layer: "up.2".into(),
        };
        let err = run_cycle(
            &bb,
            &gradient_image(1),
            &gradient_image(2),
            &bad_locator,
            &schedule,
            &small_injection(),
            &CycleConfig::default(),
            &[],
            &extractor,
            0,
        )
        .unwrap_err();
        match err {
            Error::Stage { stage, iteration, .. } => {
                assert_eq!(stage, "stage-a");
                assert_eq!(iteration, 0);
            }
            other => panic!("expected Stage error, got {other:?}"),
        }
    }

    #[test]
    fn calibration_freezes_third_iteration_losses() {
        let (bb, schedule, locator) = small_setup();
        let extractor = SeededConvExtractor::builtin();
        let (i_c, i_s) = (gradient_image(10), gradient_image(20));
        let base = CycleConfig::default();
        let (tau_c, tau_s) = calibrate_thresholds(
            &bb,
            &i_c,
            &i_s,
            &locator,
            &schedule,
            &small_injection(),
            &base,
            &[],
            &extractor,
            11,
        )
        .unwrap();
        // Cross-check against a full-length run with the same settings.
        let full = CycleConfig {
            max_iters: 5,
            tau_c: 0.0,
            tau_s: 0.0,
            comparator: ComparatorMode::Conventional,
            adain: base.adain,
        };
        let (_, state) = run_cycle(
            &bb,
            &i_c,
            &i_s,
            &locator,
            &schedule,
            &small_injection(),
            &full,
            &[],
            &extractor,
            11,
        )
        .unwrap();
        assert_eq!(tau_c, state.history[2].l_content);
        assert_eq!(tau_s, state.history[2].l_style);
    }
}
