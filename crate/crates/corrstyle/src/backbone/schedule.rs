//! Noise schedule for DDIM inversion and sampling.

use crate::error::{Error, Result};

/// Beta schedule plus derived cumulative alpha products.
///
/// `alpha_bar(t)` is indexed with `t` in `0..=total_steps`, where
/// `alpha_bar(0) == 1` (clean latent).
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one beta".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie strictly in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Linear beta ramp, the default schedule.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        let betas = (0..total_steps)
            .map(|i| {
                if total_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    pub fn default_for_steps(total_steps: usize) -> Result<Self> {
        Self::linear(total_steps, 5e-4, 0.06)
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of alphas up to and including timestep `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}
