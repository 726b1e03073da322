//! Scripted ablation experiments: one evaluation run per setting along a
//! chosen axis, collected into a comparison table.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cycle::{ComparatorMode, StopReason};
use crate::error::{Error, Result};

use super::config::Config;
use super::evaluate::{run_evaluation, RunContext};
use super::manifest::DatasetManifest;
use super::record::atomic_write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// Injection weight sweep.
    W,
    /// AdaIN on vs off.
    Adain,
    /// Sobel/Gram stopping-loss combinations.
    SobelGram,
    /// Fixed iteration counts 1..5 plus adaptive stopping.
    Iterations,
    /// Injection start step sweep.
    StartStep,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" => Ok(Self::W),
            "adain" => Ok(Self::Adain),
            "sobel-gram" => Ok(Self::SobelGram),
            "iterations" => Ok(Self::Iterations),
            "start_step" | "start-step" => Ok(Self::StartStep),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected w, adain, sobel-gram, iterations, start_step)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub fid: f64,
    pub lpips: f64,
    pub artfid: f64,
    pub cfsd: f64,
    pub excluded_pairs: usize,
    /// Mean stopping iteration across pairs, when available.
    pub mean_iterations: Option<f64>,
    /// Fraction of pairs stopped by the threshold rule (vs the cap).
    pub threshold_stop_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |tmp| {
            let json = serde_json::to_string_pretty(self)?;
            std::fs::write(tmp, json).map_err(Into::into)
        })
    }
}

/// The (label, config) settings a given axis expands to.
pub fn axis_settings(axis: AblationAxis, base: &Config) -> Vec<(String, Config)> {
    match axis {
        AblationAxis::W => [0.3, 0.6, 1.8, 2.4, 3.0]
            .iter()
            .map(|&w| {
                let mut cfg = base.clone();
                cfg.injection.w = w;
                (format!("w={w}"), cfg)
            })
            .collect(),
        AblationAxis::Adain => [true, false]
            .iter()
            .map(|&on| {
                let mut cfg = base.clone();
                cfg.cycle.adain = on;
                (format!("adain={}", if on { "on" } else { "off" }), cfg)
            })
            .collect(),
        AblationAxis::SobelGram => {
            // A disabled loss is neutralized inside the stopping rule by an
            // always-satisfied threshold under the conventional comparator.
            [(false, false), (true, false), (false, true), (true, true)]
                .iter()
                .map(|&(sobel, gram)| {
                    let mut cfg = base.clone();
                    cfg.cycle.comparator = ComparatorMode::Conventional;
                    if !sobel {
                        cfg.cycle.tau_c = f64::MAX;
                    }
                    if !gram {
                        cfg.cycle.tau_s = f64::MAX;
                    }
                    (
                        format!(
                            "sobel={},gram={}",
                            if sobel { "on" } else { "off" },
                            if gram { "on" } else { "off" }
                        ),
                        cfg,
                    )
                })
                .collect()
        }
        AblationAxis::Iterations => {
            let mut rows: Vec<(String, Config)> = (1..=5)
                .map(|z| {
                    let mut cfg = base.clone();
                    // Unsatisfiable thresholds force exactly z iterations.
                    cfg.cycle.max_iters = z;
                    cfg.cycle.comparator = ComparatorMode::Conventional;
                    cfg.cycle.tau_c = 0.0;
                    cfg.cycle.tau_s = 0.0;
                    (format!("fixed-{z}"), cfg)
                })
                .collect();
            rows.push(("adaptive".to_string(), base.clone()));
            rows
        }
        AblationAxis::StartStep => {
            let t = base.steps;
            let mut steps: Vec<usize> = [1, t / 4, t / 2, 3 * t / 4, t.saturating_sub(1)]
                .iter()
                .map(|&s| s.clamp(1, t))
                .collect();
            steps.dedup();
            steps
                .into_iter()
                .map(|s| {
                    let mut cfg = base.clone();
                    cfg.injection.start_step = s;
                    (format!("start_step={s}"), cfg)
                })
                .collect()
        }
    }
}

/// One evaluation run per axis setting, aggregated into a table.
pub fn run_ablation(
    axis: AblationAxis,
    manifest: &DatasetManifest,
    base: &Config,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (setting, cfg) in axis_settings(axis, base) {
        cfg.validate()?;
        let ctx = RunContext::new(cfg)?;
        let row_dir = out_dir.map(|d| d.join(sanitize(&setting)));
        if let Some(d) = &row_dir {
            std::fs::create_dir_all(d)?;
        }
        let outcome = run_evaluation(&ctx, manifest, row_dir.as_deref())?;
        let states: Vec<_> = outcome
            .pair_records
            .iter()
            .filter_map(|r| r.state.as_ref())
            .collect();
        let (mean_iterations, threshold_stop_rate) = if states.is_empty() {
            (None, None)
        } else {
            let n = states.len() as f64;
            (
                Some(states.iter().map(|s| s.z as f64).sum::<f64>() / n),
                Some(
                    states
                        .iter()
                        .filter(|s| s.stop_reason == StopReason::Threshold)
                        .count() as f64
                        / n,
                ),
            )
        };
        rows.push(AblationRow {
            setting,
            fid: outcome.report.fid,
            lpips: outcome.report.lpips,
            artfid: outcome.report.artfid,
            cfsd: outcome.report.cfsd,
            excluded_pairs: outcome.report.excluded_pairs,
            mean_iterations,
            threshold_stop_rate,
        });
    }
    let table = AblationTable {
        axis: format!("{axis:?}").to_lowercase(),
        rows,
    };
    if let Some(dir) = out_dir {
        table.save(&dir.join("ablation.json"))?;
    }
    Ok(table)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_row_counts() {
        let base = Config::default();
        assert_eq!(axis_settings("w".parse().unwrap(), &base).len(), 5);
        assert_eq!(axis_settings("adain".parse().unwrap(), &base).len(), 2);
        assert_eq!(axis_settings("sobel-gram".parse().unwrap(), &base).len(), 4);
        assert_eq!(axis_settings("iterations".parse().unwrap(), &base).len(), 6);
        assert_eq!(axis_settings("start_step".parse().unwrap(), &base).len(), 5);
        assert!("bogus".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn w_axis_covers_published_sweep() {
        let base = Config::default();
        let labels: Vec<String> = axis_settings(AblationAxis::W, &base)
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        assert_eq!(labels, vec!["w=0.3", "w=0.6", "w=1.8", "w=2.4", "w=3"]);
    }

    #[test]
    fn fixed_iteration_settings_pin_the_cycle_length() {
        let base = Config::default();
        let settings = axis_settings(AblationAxis::Iterations, &base);
        for (label, cfg) in &settings[..5] {
            let z: usize = label.strip_prefix("fixed-").unwrap().parse().unwrap();
            assert_eq!(cfg.cycle.max_iters, z);
            assert_eq!(cfg.cycle.tau_c, 0.0);
        }
        assert_eq!(settings[5].0, "adaptive");
        assert_eq!(settings[5].1.cycle.max_iters, base.cycle.max_iters);
    }
}
