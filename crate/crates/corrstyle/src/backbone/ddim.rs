//! Deterministic DDIM inversion and sampling over a [`Backbone`].

use crate::error::{Error, Result};

use super::hooks::HookSet;
use super::{Backbone, DiffusionSchedule, LatentTensor};

/// Invert a clean latent into its noise trajectory.
///
/// Returns `total_steps + 1` latents; index 0 is the input, index `t` the
/// latent at timestep `t`.
pub fn ddim_invert(
    backbone: &dyn Backbone,
    latent: &LatentTensor,
    schedule: &DiffusionSchedule,
) -> Result<Vec<LatentTensor>> {
    latent.check_finite("ddim_invert input", 0)?;
    let total = schedule.total_steps();
    let mut trajectory = Vec::with_capacity(total + 1);
    trajectory.push(latent.clone());
    let mut current = latent.clone();
    let mut hooks = HookSet::new();
    for t in 1..=total {
        let eps = backbone.predict_noise(&current, t, 0, &mut hooks)?;
        let ab_prev = schedule.alpha_bar(t - 1);
        let ab = schedule.alpha_bar(t);
        let x0 = (&current.data - &eps.mapv(|e| e * (1.0 - ab_prev).sqrt() as f32))
            .mapv(|v| v / (ab_prev.sqrt() as f32));
        let data = x0.mapv(|v| v * (ab.sqrt() as f32)) + eps.mapv(|e| e * ((1.0 - ab).sqrt() as f32));
        current = LatentTensor {
            data,
            image_size: current.image_size,
        };
        current
            .check_finite("ddim_invert", t)
            .map_err(|_| Error::NonFinite {
                context: "ddim_invert trajectory".into(),
                timestep: t,
            })?;
        trajectory.push(current.clone());
    }
    Ok(trajectory)
}

/// Sample from a t=T latent down to t=0, dispatching `hooks` at every
/// self-attention block. Hook block registrations are validated before the
/// first model call.
pub fn ddim_sample(
    backbone: &dyn Backbone,
    start: &LatentTensor,
    schedule: &DiffusionSchedule,
    hooks: &mut HookSet<'_>,
) -> Result<LatentTensor> {
    hooks.validate(backbone.info())?;
    start.check_finite("ddim_sample start", schedule.total_steps())?;
    let total = schedule.total_steps();
    let mut current = start.clone();
    for t in (1..=total).rev() {
        // 1-based count of completed denoising steps once this one finishes.
        let step_index = total - t + 1;
        let eps = backbone.predict_noise(&current, t, step_index, hooks)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let x0 = (&current.data - &eps.mapv(|e| e * ((1.0 - ab).sqrt() as f32)))
            .mapv(|v| v / (ab.sqrt() as f32));
        let data =
            x0.mapv(|v| v * (ab_prev.sqrt() as f32)) + eps.mapv(|e| e * ((1.0 - ab_prev).sqrt() as f32));
        current = LatentTensor {
            data,
            image_size: current.image_size,
        };
        current
            .check_finite("ddim_sample", t)
            .map_err(|_| Error::NonFinite {
                context: "ddim_sample trajectory".into(),
                timestep: t,
            })?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::hooks::{AttentionHook, AttnSite, QkvCaptureHook};
    use crate::backbone::SyntheticBackbone;
    use crate::imaging::RgbImage;

    fn test_image() -> RgbImage {
        let mut img = RgbImage::zeros(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                img.data_mut()[[0, y, x]] = ((x as f32 / 10.0).sin() * 0.4 + 0.5).clamp(0.0, 1.0);
                img.data_mut()[[1, y, x]] = ((y as f32 / 8.0).cos() * 0.3 + 0.5).clamp(0.0, 1.0);
                img.data_mut()[[2, y, x]] = ((x + y) as f32 / 128.0).clamp(0.0, 1.0);
            }
        }
        img
    }

    #[test]
    fn trajectory_has_length_t_plus_one() {
        let bb = SyntheticBackbone::new("synthetic-v1", 1);
        let latent = bb.encode(&test_image()).unwrap();
        let short = DiffusionSchedule::linear(1, 0.01, 0.01).unwrap();
        let traj = ddim_invert(&bb, &latent, &short).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[0], latent);
    }

    #[test]
    fn inversion_is_deterministic() {
        let bb = SyntheticBackbone::new("synthetic-v1", 1);
        let latent = bb.encode(&test_image()).unwrap();
        let schedule = DiffusionSchedule::default_for_steps(10).unwrap();
        let a = ddim_invert(&bb, &latent, &schedule).unwrap();
        let b = ddim_invert(&bb, &latent, &schedule).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn invert_then_sample_reconstructs() {
        let bb = SyntheticBackbone::new("synthetic-v1", 1);
        let latent = bb.encode(&test_image()).unwrap();
        let schedule = DiffusionSchedule::default_for_steps(50).unwrap();
        let traj = ddim_invert(&bb, &latent, &schedule).unwrap();
        let recon = ddim_sample(&bb, traj.last().unwrap(), &schedule, &mut HookSet::new()).unwrap();
        let mad = (&recon.data - &latent.data).mapv(f32::abs).mean().unwrap();
        assert!(mad < 1e-2, "roundtrip mean absolute deviation {mad}");
    }

    #[test]
    fn observer_hooks_are_transparent() {
        let bb = SyntheticBackbone::new("synthetic-v1", 1);
        let latent = bb.encode(&test_image()).unwrap();
        let schedule = DiffusionSchedule::default_for_steps(8).unwrap();
        let traj = ddim_invert(&bb, &latent, &schedule).unwrap();
        let start = traj.last().unwrap();
        let plain = ddim_sample(&bb, start, &schedule, &mut HookSet::new()).unwrap();
        let mut capture = QkvCaptureHook::new(bb.info().block_ids());
        let mut hooks = HookSet::new();
        hooks.push(&mut capture);
        let observed = ddim_sample(&bb, start, &schedule, &mut hooks).unwrap();
        assert!(!capture.records.is_empty());
        assert_eq!(plain.data, observed.data);
    }

    #[test]
    fn unknown_block_fails_before_sampling() {
        struct BadHook;
        impl AttentionHook for BadHook {
            fn blocks(&self) -> Vec<String> {
                vec!["nonexistent".into()]
            }
        }
        let bb = SyntheticBackbone::new("synthetic-v1", 1);
        let latent = bb.encode(&test_image()).unwrap();
        let schedule = DiffusionSchedule::default_for_steps(4).unwrap();
        let mut bad = BadHook;
        let mut hooks = HookSet::new();
        hooks.push(&mut bad);
        match ddim_sample(&bb, &latent, &schedule, &mut hooks) {
            Err(crate::error::Error::UnknownBlock(b)) => assert_eq!(b, "nonexistent"),
            other => panic!("expected UnknownBlock, got {other:?}"),
        }
    }

    #[test]
    fn hooks_fire_once_per_block_per_timestep() {
        use std::sync::{Arc, Mutex};
        struct SharedCount {
            seen: Arc<Mutex<std::collections::BTreeMap<(usize, String), usize>>>,
        }
        impl AttentionHook for SharedCount {
            fn blocks(&self) -> Vec<String> {
                vec!["up.0".into(), "up.2".into()]
            }
            fn on_qkv(
                &mut self,
                site: &AttnSite,
                _q: &ndarray::Array2<f32>,
                _k: &mut ndarray::Array2<f32>,
                _v: &mut ndarray::Array2<f32>,
            ) -> crate::error::Result<()> {
                *self
                    .seen
                    .lock()
                    .unwrap()
                    .entry((site.timestep, site.block.clone()))
                    .or_insert(0) += 1;
                Ok(())
            }
        }
        let bb = SyntheticBackbone::new("synthetic-v1", 1);
        let latent = bb.encode(&test_image()).unwrap();
        let schedule = DiffusionSchedule::default_for_steps(6).unwrap();
        let counter = Arc::new(Mutex::new(std::collections::BTreeMap::new()));
        let mut hook = SharedCount {
            seen: counter.clone(),
        };
        let mut hooks = HookSet::new();
        hooks.push(&mut hook);
        ddim_sample(&bb, &latent, &schedule, &mut hooks).unwrap();
        let seen = counter.lock().unwrap();
        assert_eq!(seen.len(), 12);
        assert!(seen.values().all(|&c| c == 1));
    }
}
