//! Batch stylization and metric aggregation over a dataset manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{load_checkpoint, Backbone, DiffusionSchedule, FeatureLocator};
use crate::correspondence::CachedLocator;
use crate::cycle::{run_cycle, CycleState};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::metrics::extractor::{resolve_extractor, AssetManifest, FeatureExtractor};
use crate::metrics::{cfsd, fid, lpips, MetricReport, PairScore};

use super::config::Config;
use super::manifest::DatasetManifest;
use super::record::atomic_write;

/// Everything shared by the workers of one run.
pub struct RunContext {
    pub config: Config,
    pub backbone: Box<dyn Backbone>,
    pub schedule: DiffusionSchedule,
    pub extractor: Box<dyn FeatureExtractor>,
    pub locator: FeatureLocator,
}

impl RunContext {
    /// Resolve the checkpoint, schedule, extractor, and (t*, l*) locator
    /// from a validated config.
    pub fn new(config: Config) -> Result<Self> {
        let backbone = load_checkpoint(&config.checkpoint)?;
        let schedule = DiffusionSchedule::default_for_steps(config.steps)?;
        let asset_manifest = match &config.metrics.asset_manifest {
            Some(path) => Some(AssetManifest::load(path)?),
            None => None,
        };
        let extractor = resolve_extractor(&config.metrics.extractor, asset_manifest.as_ref())?;
        let locator = match &config.correspondence.locator_cache {
            Some(path) if Path::new(path).exists() => {
                let cached = CachedLocator::load(path)?;
                if cached.checkpoint != config.checkpoint {
                    return Err(Error::Config(format!(
                        "cached locator `{path}` was computed for checkpoint `{}`, config names `{}`",
                        cached.checkpoint, config.checkpoint
                    )));
                }
                cached.locator()
            }
            // Without a cache, fall back to the mid-range candidate cell:
            // the median candidate timestep on the deepest up-block.
            _ => {
                let ts = &config.correspondence.timesteps;
                let t = ts[ts.len() / 2];
                let layer = backbone
                    .info()
                    .blocks
                    .last()
                    .map(|b| b.id.clone())
                    .ok_or_else(|| Error::Checkpoint("checkpoint has no blocks".into()))?;
                FeatureLocator { timestep: t, layer }
            }
        };
        if locator.timestep > config.steps {
            return Err(Error::Config(format!(
                "locator timestep {} exceeds steps {}",
                locator.timestep, config.steps
            )));
        }
        Ok(Self {
            config,
            backbone,
            schedule,
            extractor,
            locator,
        })
    }

    pub fn config_hash(&self) -> Result<String> {
        let toml = self.config.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(toml.as_bytes());
        Ok(hex::encode(hasher.finalize()))
    }

    fn load_resized(&self, path: &Path) -> Result<RgbImage> {
        let img = RgbImage::load(path)?;
        let r = self.config.resolution;
        if (img.height(), img.width()) == (r, r) {
            Ok(img)
        } else {
            Ok(img.resize_bilinear(r, r))
        }
    }

    /// Stylize one content/style pair with the full refinement cycle.
    pub fn transfer(&self, content: &RgbImage, style: &RgbImage) -> Result<(RgbImage, CycleState)> {
        run_cycle(
            self.backbone.as_ref(),
            content,
            style,
            &self.locator,
            &self.schedule,
            &self.config.injection,
            &self.config.cycle,
            &self.config.losses.style_layers,
            self.extractor.as_ref(),
            self.config.seed,
        )
    }
}

/// One pair's outcome inside an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub content_id: String,
    pub style_id: String,
    pub output_path: Option<PathBuf>,
    pub state: Option<CycleState>,
    pub error: Option<String>,
    pub duration_ms: u64,
}

#[derive(Debug)]
pub struct EvaluationOutcome {
    pub report: MetricReport,
    pub pair_records: Vec<PairRecord>,
}

/// Run every manifest pair through the pipeline, then aggregate metrics:
/// FID between the stylized set and the style set, mean LPIPS and CFSD
/// between stylized outputs and their content images. Failed pairs are
/// excluded from the aggregates and counted in the report.
///
/// When `out_dir` is given, stylized images and per-pair sidecars are
/// persisted there.
pub fn run_evaluation(
    ctx: &RunContext,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
) -> Result<EvaluationOutcome> {
    let pairs = manifest.pairs();
    if pairs.is_empty() {
        return Err(Error::EmptyInput("manifest has no pairs".into()));
    }
    let config_hash = ctx.config_hash()?;

    struct PairResult {
        record: PairRecord,
        success: Option<(RgbImage, RgbImage)>, // (stylized, content)
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<PairResult> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(c, s)| {
                let started = Instant::now();
                let run = || -> Result<(RgbImage, RgbImage, CycleState)> {
                    let content = ctx.load_resized(&c.path)?;
                    let style = ctx.load_resized(&s.path)?;
                    let (stylized, state) = ctx.transfer(&content, &style)?;
                    Ok((stylized, content, state))
                };
                match run() {
                    Ok((stylized, content, state)) => {
                        let mut output_path = None;
                        let mut error = None;
                        if let Some(dir) = out_dir {
                            let path = dir.join(format!("{}__{}.png", c.id, s.id));
                            match stylized.save(&path).and_then(|()| {
                                atomic_write(&path.with_extension("json"), |tmp| {
                                    let json = serde_json::to_string_pretty(&state)?;
                                    std::fs::write(tmp, json).map_err(Into::into)
                                })
                            }) {
                                Ok(()) => output_path = Some(path),
                                Err(e) => error = Some(format!("persisting output: {e}")),
                            }
                        }
                        let failed = error.is_some();
                        PairResult {
                            record: PairRecord {
                                content_id: c.id.clone(),
                                style_id: s.id.clone(),
                                output_path,
                                state: Some(state),
                                error,
                                duration_ms: started.elapsed().as_millis() as u64,
                            },
                            success: if failed {
                                None
                            } else {
                                Some((stylized, content))
                            },
                        }
                    }
                    Err(e) => PairResult {
                        record: PairRecord {
                            content_id: c.id.clone(),
                            style_id: s.id.clone(),
                            output_path: None,
                            state: None,
                            error: Some(e.to_string()),
                            duration_ms: started.elapsed().as_millis() as u64,
                        },
                        success: None,
                    },
                }
            })
            .collect()
    });

    let mut pair_scores = Vec::new();
    let mut stylized_embeddings = Vec::new();
    let mut excluded = 0usize;
    for r in &results {
        match &r.success {
            Some((stylized, content)) => {
                let l = lpips(stylized, content, ctx.extractor.as_ref())?;
                let c = cfsd(
                    content,
                    stylized,
                    ctx.extractor.as_ref(),
                    &ctx.config.metrics.cfsd_layer,
                )?;
                pair_scores.push(PairScore {
                    content_id: r.record.content_id.clone(),
                    style_id: r.record.style_id.clone(),
                    lpips: l,
                    cfsd: c,
                });
                stylized_embeddings.push(ctx.extractor.pooled_embedding(stylized)?);
            }
            None => excluded += 1,
        }
    }
    if pair_scores.is_empty() {
        return Err(Error::Numerical(format!(
            "all {excluded} pairs failed; first error: {}",
            results
                .iter()
                .find_map(|r| r.record.error.clone())
                .unwrap_or_default()
        )));
    }

    let mut style_embeddings = Vec::new();
    for s in &manifest.style {
        let img = ctx.load_resized(&s.path)?;
        style_embeddings.push(ctx.extractor.pooled_embedding(&img)?);
    }
    let fid_value = fid(&style_embeddings, &stylized_embeddings)?;
    let mean = |f: fn(&PairScore) -> f64| {
        pair_scores.iter().map(f).sum::<f64>() / pair_scores.len() as f64
    };
    let report = MetricReport::new(
        fid_value,
        mean(|p| p.lpips),
        mean(|p| p.cfsd),
        config_hash,
        manifest
            .content
            .iter()
            .chain(&manifest.style)
            .map(|e| e.id.clone())
            .collect(),
        excluded,
        pair_scores,
    )?;
    report.validate()?;

    if let Some(dir) = out_dir {
        atomic_write(&dir.join("report.json"), |tmp| {
            let json = serde_json::to_string_pretty(&report)?;
            std::fs::write(tmp, json).map_err(Into::into)
        })?;
        atomic_write(&dir.join("pairs.jsonl"), |tmp| {
            let mut text = String::new();
            for r in &results {
                text.push_str(&serde_json::to_string(&r.record)?);
                text.push('\n');
            }
            std::fs::write(tmp, text).map_err(Into::into)
        })?;
    }
    Ok(EvaluationOutcome {
        report,
        pair_records: results.into_iter().map(|r| r.record).collect(),
    })
}
