//! Layered run configuration: built-in defaults, overridden by a TOML
//! file, overridden by CLI flags. Every pipeline hyperparameter lives here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cycle::{ComparatorMode, CycleConfig};
use crate::error::{Error, Result};
use crate::injection::InjectionConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondenceConfig {
    /// Candidate timesteps for the (t, l) grid search.
    pub timesteps: Vec<usize>,
    /// Candidate layers; empty means all decoder up-blocks.
    pub layers: Vec<String>,
    /// PCK relative threshold.
    pub alpha: f64,
    /// Optional path of a cached (t*, l*) locator file.
    pub locator_cache: Option<String>,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![1, 11, 21, 31, 41],
            layers: Vec::new(),
            alpha: 0.1,
            locator_cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Extractor layers used for the Gram style loss; empty means all.
    pub style_layers: Vec<String>,
    pub gram_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            style_layers: Vec::new(),
            gram_normalize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Perceptual extractor identifier.
    pub extractor: String,
    /// Optional extractor asset manifest (name -> url + sha256).
    pub asset_manifest: Option<String>,
    /// Extractor layer used for CFSD self-correlation.
    pub cfsd_layer: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            extractor: "builtin-perceptual-v1".to_string(),
            asset_manifest: None,
            cfsd_layer: "conv3".to_string(),
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Checkpoint identifier resolved by the backbone loader.
    pub checkpoint: String,
    /// Working resolution (images are resized to resolution x resolution).
    pub resolution: usize,
    /// Diffusion steps T.
    pub steps: usize,
    /// Global seed propagated to all stochastic stages.
    pub seed: u64,
    /// Parallel pair workers; 0 uses the runtime default.
    pub workers: usize,
    pub injection: InjectionConfig,
    pub cycle: CycleConfig,
    pub correspondence: CorrespondenceConfig,
    pub losses: LossConfig,
    pub metrics: MetricsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            checkpoint: "synthetic-v1".to_string(),
            resolution: 64,
            steps: 50,
            seed: 0,
            workers: 0,
            injection: InjectionConfig::default(),
            cycle: CycleConfig::default(),
            correspondence: CorrespondenceConfig::default(),
            losses: LossConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// CLI-level overrides, applied on top of defaults and the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub checkpoint: Option<String>,
    pub resolution: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub w: Option<f64>,
    pub gamma: Option<f64>,
    pub start_step: Option<usize>,
    pub tau_c: Option<f64>,
    pub tau_s: Option<f64>,
    pub max_iters: Option<usize>,
    pub comparator: Option<ComparatorMode>,
    pub adain: Option<bool>,
    pub alpha: Option<f64>,
    pub extractor: Option<String>,
}

impl Config {
    /// Defaults, overlaid by `file` (if given), overlaid by `overrides`.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config: Config = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config `{}`: {e}", path.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("config `{}`: {e}", path.display())))?
            }
            None => Config::default(),
        };
        config.apply(overrides);
        config.adapt_defaults_to_steps();
        config.validate()?;
        Ok(config)
    }

    /// The built-in injection start step and correspondence candidate
    /// timesteps are stated for T=50. When `steps` differs and those keys
    /// were left at their T=50 defaults, rescale them to the configured
    /// step count; explicitly set values are validated as-is.
    fn adapt_defaults_to_steps(&mut self) {
        if self.steps == 50 {
            return;
        }
        let d = Config::default();
        if self.injection.start_step == d.injection.start_step {
            self.injection.start_step = self.steps.saturating_sub(1).max(1);
        }
        if self.correspondence.timesteps == d.correspondence.timesteps {
            let mut ts: Vec<usize> = (0..5)
                .map(|i| 1 + i * self.steps / 5)
                .filter(|&t| t <= self.steps)
                .collect();
            ts.dedup();
            self.correspondence.timesteps = ts;
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($field:expr, $opt:expr) => {
                if let Some(v) = &$opt {
                    $field = v.clone();
                }
            };
        }
        set!(self.checkpoint, o.checkpoint);
        set!(self.resolution, o.resolution);
        set!(self.steps, o.steps);
        set!(self.seed, o.seed);
        set!(self.workers, o.workers);
        set!(self.injection.w, o.w);
        set!(self.injection.gamma, o.gamma);
        set!(self.injection.start_step, o.start_step);
        set!(self.cycle.tau_c, o.tau_c);
        set!(self.cycle.tau_s, o.tau_s);
        set!(self.cycle.max_iters, o.max_iters);
        set!(self.cycle.comparator, o.comparator);
        set!(self.cycle.adain, o.adain);
        set!(self.correspondence.alpha, o.alpha);
        set!(self.metrics.extractor, o.extractor);
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.resolution < 32 || self.resolution % 32 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 32, got {}",
                self.resolution
            )));
        }
        if self.correspondence.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "correspondence.alpha must be > 0, got {}",
                self.correspondence.alpha
            )));
        }
        if self.correspondence.timesteps.is_empty() {
            return Err(Error::Config("correspondence.timesteps must be non-empty".into()));
        }
        if let Some(&t) = self
            .correspondence
            .timesteps
            .iter()
            .find(|&&t| t < 1 || t > self.steps)
        {
            return Err(Error::Config(format!(
                "correspondence timestep {t} outside [1, {}]",
                self.steps
            )));
        }
        self.injection.validate(self.steps)?;
        self.cycle.validate()?;
        Ok(())
    }

    /// Canonical TOML serialization, used for hashing and RunRecords.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
