//! Deterministic desk-scale fixture suite: 5 procedurally generated
//! content images, 5 style images, a cartesian manifest, and a synthetic
//! keypoint benchmark for the correspondence grid search.

use std::path::{Path, PathBuf};

use crate::correspondence::{save_keypoint_manifest, KeypointPair, KeypointRecord};
use crate::error::Result;
use crate::imaging::RgbImage;

pub const FIXTURE_SIDE: usize = 64;

/// Smooth, structured scenes standing in for photographic content.
pub fn content_image(index: usize) -> RgbImage {
    let n = FIXTURE_SIDE;
    let mut img = RgbImage::zeros(n, n);
    let fi = index as f32;
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f32 / (n - 1) as f32, y as f32 / (n - 1) as f32);
            // A soft disk whose center depends on the index, over a gradient.
            let (cx, cy) = (0.25 + 0.125 * fi, 0.7 - 0.1 * fi);
            let d = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
            let disk = (1.0 - (d * 6.0).min(1.0)).powi(2);
            let r = 0.25 + 0.5 * xf + 0.3 * disk;
            let g = 0.2 + 0.4 * yf + 0.35 * disk + 0.05 * fi;
            let b = 0.6 - 0.3 * yf + 0.2 * (1.0 - disk);
            img.data_mut()[[0, y, x]] = r.clamp(0.0, 1.0);
            img.data_mut()[[1, y, x]] = g.clamp(0.0, 1.0);
            img.data_mut()[[2, y, x]] = b.clamp(0.0, 1.0);
        }
    }
    img
}

/// Textured, high-frequency patterns with distinct palettes standing in
/// for artistic styles.
pub fn style_image(index: usize) -> RgbImage {
    let n = FIXTURE_SIDE;
    let mut img = RgbImage::zeros(n, n);
    let fi = index as f32;
    let freq = 0.35 + 0.22 * fi;
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f32, y as f32);
            let wave = ((xf * freq).sin() * (yf * freq * 0.8).cos() * 0.5 + 0.5).powf(1.2);
            let swirl = ((xf + yf) * freq * 0.5 + fi).sin() * 0.5 + 0.5;
            let r = 0.15 + 0.7 * wave * (0.4 + 0.15 * fi).min(1.0);
            let g = 0.2 + 0.6 * swirl * (1.0 - 0.12 * fi).max(0.2);
            let b = 0.25 + 0.65 * (wave * swirl);
            img.data_mut()[[0, y, x]] = r.clamp(0.0, 1.0);
            img.data_mut()[[1, y, x]] = g.clamp(0.0, 1.0);
            img.data_mut()[[2, y, x]] = b.clamp(0.0, 1.0);
        }
    }
    img
}

const STYLE_CATEGORIES: [&str; 5] = [
    "impressionism",
    "expressionism",
    "cubism",
    "pointillism",
    "ukiyo-e",
];

/// Write the 5x5 fixture suite under `dir` and return the manifest path.
pub fn write_fixture_suite(dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut lines = Vec::new();
    for i in 0..5 {
        let name = format!("content_{i}.png");
        content_image(i).save(dir.join(&name))?;
        lines.push(format!(
            r#"{{"kind":"content","id":"content_{i}","path":"{name}"}}"#
        ));
    }
    for i in 0..5 {
        let name = format!("style_{i}.png");
        style_image(i).save(dir.join(&name))?;
        lines.push(format!(
            r#"{{"kind":"style","id":"style_{i}","path":"{name}","category":"{}"}}"#,
            STYLE_CATEGORIES[i]
        ));
    }
    let manifest = dir.join("manifest.jsonl");
    super::record::atomic_write(&manifest, |tmp| {
        std::fs::write(tmp, lines.join("\n") + "\n").map_err(Into::into)
    })?;
    Ok(manifest)
}

/// Write a synthetic keypoint benchmark under `dir` and return its path.
///
/// Each record pairs a content image with itself; ground-truth
/// correspondences are the identity on a coarse grid of cell centers, so a
/// well-chosen feature space must recover them.
pub fn write_keypoint_fixture(dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let n = FIXTURE_SIDE as f64;
    let mut records = Vec::new();
    for i in 0..5 {
        let name = format!("content_{i}.png");
        let path = dir.join(&name);
        if !path.exists() {
            content_image(i).save(&path)?;
        }
        // 4x4 grid of cell centers as keypoints.
        let mut keypoints = Vec::new();
        for gy in 0..4 {
            for gx in 0..4 {
                let p = (
                    (gy as f64 + 0.5) * n / 4.0,
                    (gx as f64 + 0.5) * n / 4.0,
                );
                keypoints.push(KeypointPair {
                    source: p,
                    target: p,
                });
            }
        }
        let path_str = path.to_string_lossy().into_owned();
        records.push(KeypointRecord {
            source_path: path_str.clone(),
            target_path: path_str,
            keypoints,
        });
    }
    let manifest = dir.join("keypoints.jsonl");
    save_keypoint_manifest(&manifest, &records)?;
    Ok(manifest)
}
