//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::backbone::features::extract_features;
use crate::backbone::FeatureLocator;
use crate::correspondence::{grid_search, BenchmarkPair, CachedLocator};
use crate::cycle::ComparatorMode;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

use super::ablate::{run_ablation, AblationAxis};
use super::config::{Config, Overrides};
use super::evaluate::{run_evaluation, RunContext};
use super::fixtures;
use super::manifest::load_manifest;
use super::record::{atomic_write, RunRecord};

#[derive(Debug, Parser)]
#[command(
    name = "corrstyle",
    version,
    about = "Training-free correspondence-guided style transfer and evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML config file layered over built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint identifier.
    #[arg(long, global = true)]
    checkpoint: Option<String>,
    /// Working resolution (multiple of 32).
    #[arg(long, global = true)]
    resolution: Option<usize>,
    /// Diffusion steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel pair workers (0 = automatic).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Injection weight w.
    #[arg(long, global = true)]
    w: Option<f64>,
    /// Attention temperature gamma.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// 1-based denoising step at which injection activates.
    #[arg(long, global = true)]
    start_step: Option<usize>,
    /// Content-loss stopping threshold.
    #[arg(long, global = true)]
    tau_c: Option<f64>,
    /// Style-loss stopping threshold.
    #[arg(long, global = true)]
    tau_s: Option<f64>,
    /// Maximum refinement iterations Z.
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Stopping comparator: paper-as-written | conventional.
    #[arg(long, global = true)]
    comparator: Option<String>,
    /// Enable/disable AdaIN tone harmonization.
    #[arg(long, global = true)]
    adain: Option<bool>,
    /// PCK relative threshold alpha.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Perceptual extractor identifier.
    #[arg(long, global = true)]
    extractor: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stylize one content/style pair.
    Transfer {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a dataset manifest: FID, LPIPS, ArtFID, CFSD.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; default `outputs/<run-id>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Search candidate (timestep, layer) cells by PCK on a keypoint benchmark.
    Gridsearch {
        #[arg(long)]
        keypoints: PathBuf,
        /// Cached locator output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scripted ablation axis over a manifest.
    Ablate {
        /// Axis: w | adain | sobel-gram | iterations | start_step.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Describe the checkpoint's feature layers as a key-value fixture file.
    Inspect {
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the deterministic desk-scale fixture suite.
    Fixtures {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn overrides_from(common: &CommonArgs) -> Result<Overrides> {
    Ok(Overrides {
        checkpoint: common.checkpoint.clone(),
        resolution: common.resolution,
        steps: common.steps,
        seed: common.seed,
        workers: common.workers,
        w: common.w,
        gamma: common.gamma,
        start_step: common.start_step,
        tau_c: common.tau_c,
        tau_s: common.tau_s,
        max_iters: common.max_iters,
        comparator: common
            .comparator
            .as_deref()
            .map(str::parse::<ComparatorMode>)
            .transpose()?,
        adain: common.adain,
        alpha: common.alpha,
        extractor: common.extractor.clone(),
    })
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Manifest(_)
        | Error::Parse { .. }
        | Error::InvalidLocator(_)
        | Error::UnknownBlock(_)
        | Error::EmptyInput(_) => 1,
        _ => 2,
    }
}

fn default_out_dir(config: &Config) -> Result<PathBuf> {
    let toml = config.to_toml()?;
    let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
    sha2::Digest::update(&mut hasher, toml.as_bytes());
    let hash = hex::encode(sha2::Digest::finalize(hasher));
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(PathBuf::from("outputs").join(format!("{ts}-{}", &hash[..8])))
}

fn write_run_record(dir: &Path, command: &str, config: &Config) -> Result<()> {
    let record = RunRecord::new(command, &config.to_toml()?, config.seed);
    record.save(&dir.join("run.json"))
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own usage/help text; --help and --version are
            // successes, everything else is a usage error.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let overrides = overrides_from(&cli.common)?;
    let config = Config::load(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Transfer { content, style, out } => cmd_transfer(config, &content, &style, &out),
        Command::Evaluate { manifest, out_dir } => cmd_evaluate(config, &manifest, out_dir),
        Command::Gridsearch { keypoints, out } => cmd_gridsearch(config, &keypoints, &out),
        Command::Ablate {
            axis,
            manifest,
            out_dir,
        } => cmd_ablate(config, &axis, &manifest, out_dir),
        Command::Inspect { out } => cmd_inspect(config, out.as_deref()),
        Command::Fixtures { out_dir } => {
            let manifest = fixtures::write_fixture_suite(&out_dir)?;
            fixtures::write_keypoint_fixture(&out_dir)?;
            println!("wrote fixture suite; manifest at {}", manifest.display());
            Ok(())
        }
    }
}

fn cmd_transfer(config: Config, content: &Path, style: &Path, out: &Path) -> Result<()> {
    let ctx = RunContext::new(config)?;
    let r = ctx.config.resolution;
    let content_img = RgbImage::load(content)?.resize_bilinear(r, r);
    let style_img = RgbImage::load(style)?.resize_bilinear(r, r);
    let (stylized, state) = ctx.transfer(&content_img, &style_img)?;
    stylized.save(out)?;
    atomic_write(&out.with_extension("json"), |tmp| {
        let json = serde_json::to_string_pretty(&state)?;
        std::fs::write(tmp, json).map_err(Into::into)
    })?;
    let record_dir = out.parent().unwrap_or_else(|| Path::new("."));
    write_run_record(record_dir, "transfer", &ctx.config)?;
    println!(
        "stylized {} with {} -> {} (stopped at z={} by {:?})",
        content.display(),
        style.display(),
        out.display(),
        state.z,
        state.stop_reason
    );
    Ok(())
}

fn cmd_evaluate(config: Config, manifest_path: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let ctx = RunContext::new(config)?;
    let out_dir = match out_dir {
        Some(d) => d,
        None => default_out_dir(&ctx.config)?,
    };
    std::fs::create_dir_all(&out_dir)?;
    write_run_record(&out_dir, "evaluate", &ctx.config)?;
    let outcome = run_evaluation(&ctx, &manifest, Some(&out_dir))?;
    println!(
        "fid={:.6} lpips={:.6} artfid={:.6} cfsd={:.6} pairs={} excluded={}",
        outcome.report.fid,
        outcome.report.lpips,
        outcome.report.artfid,
        outcome.report.cfsd,
        outcome.report.pairs.len(),
        outcome.report.excluded_pairs
    );
    println!("report written to {}", out_dir.join("report.json").display());
    Ok(())
}

fn cmd_gridsearch(config: Config, keypoints: &Path, out: &Path) -> Result<()> {
    let ctx = RunContext::new(config)?;
    let records = crate::correspondence::load_keypoint_manifest(keypoints)?;
    if records.is_empty() {
        return Err(Error::EmptyInput("keypoint manifest has no records".into()));
    }
    let r = ctx.config.resolution;
    // Pre-load every referenced image once, resized to the working size.
    let mut images: Vec<(RgbImage, RgbImage)> = Vec::with_capacity(records.len());
    for rec in &records {
        let src = RgbImage::load(&rec.source_path)?.resize_bilinear(r, r);
        let dst = RgbImage::load(&rec.target_path)?.resize_bilinear(r, r);
        images.push((src, dst));
    }
    let pairs: Vec<BenchmarkPair> = records
        .iter()
        .enumerate()
        .map(|(i, rec)| BenchmarkPair {
            id: format!("pair-{i}"),
            keypoints: rec.keypoints.clone(),
            source_image: (r, r),
            target_image: (r, r),
        })
        .collect();
    let layers = if ctx.config.correspondence.layers.is_empty() {
        ctx.backbone.info().block_ids()
    } else {
        ctx.config.correspondence.layers.clone()
    };
    let index_of = |id: &str| -> usize { id.trim_start_matches("pair-").parse().unwrap() };
    let result = grid_search(
        &pairs,
        |pair, locator: &FeatureLocator| {
            let (src, dst) = &images[index_of(&pair.id)];
            let fs = extract_features(
                ctx.backbone.as_ref(),
                src,
                locator,
                &ctx.schedule,
                ctx.config.seed,
                "source",
            )?;
            let fd = extract_features(
                ctx.backbone.as_ref(),
                dst,
                locator,
                &ctx.schedule,
                ctx.config.seed,
                "target",
            )?;
            Ok((fs, fd))
        },
        &ctx.config.correspondence.timesteps,
        &layers,
        ctx.config.correspondence.alpha,
    )?;
    let cached = CachedLocator::from_result(&ctx.config.checkpoint, &result);
    cached.save(out)?;
    let record_dir = out.parent().unwrap_or_else(|| Path::new("."));
    write_run_record(record_dir, "gridsearch", &ctx.config)?;
    println!(
        "best cell: t={} l={} (mean PCK {:.4}); cached at {}",
        result.best.timestep,
        result.best.layer,
        result.best_score,
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    config: Config,
    axis: &str,
    manifest_path: &Path,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let manifest = load_manifest(manifest_path)?;
    let out_dir = match out_dir {
        Some(d) => d,
        None => default_out_dir(&config)?,
    };
    std::fs::create_dir_all(&out_dir)?;
    write_run_record(&out_dir, "ablate", &config)?;
    let table = run_ablation(axis, &manifest, &config, Some(&out_dir))?;
    println!("{:<24} {:>12} {:>12} {:>12} {:>12}", "setting", "fid", "lpips", "artfid", "cfsd");
    for row in &table.rows {
        println!(
            "{:<24} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            row.setting, row.fid, row.lpips, row.artfid, row.cfsd
        );
    }
    println!("table written to {}", out_dir.join("ablation.json").display());
    Ok(())
}

fn cmd_inspect(config: Config, out: Option<&Path>) -> Result<()> {
    let ctx = RunContext::new(config)?;
    let info = ctx.backbone.info();
    let size = (ctx.config.resolution, ctx.config.resolution);
    let mut text = String::new();
    text.push_str(&format!("checkpoint = {}\n", info.id));
    text.push_str(&format!("latent_channels = {}\n", info.latent_channels));
    text.push_str(&format!("downsample_factor = {}\n", info.downsample_factor));
    text.push_str(&format!(
        "resolution = {}x{}\n",
        ctx.config.resolution, ctx.config.resolution
    ));
    for block in &info.blocks {
        let (h, w) = info.block_grid(&block.id, size)?;
        text.push_str(&format!(
            "layer.{} = channels:{} height:{} width:{}\n",
            block.id, block.channels, h, w
        ));
    }
    match out {
        Some(path) => {
            atomic_write(path, |tmp| std::fs::write(tmp, &text).map_err(Into::into))?;
            println!("fixture written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
