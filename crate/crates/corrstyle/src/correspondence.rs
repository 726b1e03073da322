//! Dense semantic correspondence between feature maps, PCK scoring against
//! keypoint annotations, and the (t, l) grid search that picks the feature
//! space used for injection.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureLocator, FeatureMap};
use crate::error::{Error, Result};

/// Total per-pixel mapping from a source feature grid into a target grid.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    pub source_grid: (usize, usize),
    pub target_grid: (usize, usize),
    /// Row-major over the source grid: matched (y, x) in the target grid.
    pub targets: Vec<(usize, usize)>,
    /// Cosine similarity of each match, in [-1, 1].
    pub scores: Vec<f32>,
    pub locator_used: FeatureLocator,
}

impl CorrespondenceMap {
    pub fn lookup(&self, y: usize, x: usize) -> (usize, usize) {
        self.targets[y * self.source_grid.1 + x]
    }

    pub fn score(&self, y: usize, x: usize) -> f32 {
        self.scores[y * self.source_grid.1 + x]
    }

    /// Re-sample the map onto a different source grid by nearest neighbor:
    /// each new source cell inherits the match of the old cell it covers.
    pub fn rescale_sources(&self, grid: (usize, usize)) -> Self {
        if grid == self.source_grid {
            return self.clone();
        }
        let (sh, sw) = self.source_grid;
        let mut targets = Vec::with_capacity(grid.0 * grid.1);
        let mut scores = Vec::with_capacity(grid.0 * grid.1);
        for y in 0..grid.0 {
            for x in 0..grid.1 {
                let oy = (((y as f64 + 0.5) * sh as f64 / grid.0 as f64) as usize).min(sh - 1);
                let ox = (((x as f64 + 0.5) * sw as f64 / grid.1 as f64) as usize).min(sw - 1);
                targets.push(self.targets[oy * sw + ox]);
                scores.push(self.scores[oy * sw + ox]);
            }
        }
        Self {
            source_grid: grid,
            targets,
            scores,
            ..self.clone()
        }
    }

    /// Rescale target coordinates to a different grid by nearest neighbor.
    pub fn rescale_targets(&self, grid: (usize, usize)) -> Self {
        if grid == self.target_grid {
            return self.clone();
        }
        let (th, tw) = self.target_grid;
        let targets = self
            .targets
            .iter()
            .map(|&(y, x)| {
                let ny = ((y as f64 + 0.5) * grid.0 as f64 / th as f64) as usize;
                let nx = ((x as f64 + 0.5) * grid.1 as f64 / tw as f64) as usize;
                (ny.min(grid.0 - 1), nx.min(grid.1 - 1))
            })
            .collect();
        Self {
            target_grid: grid,
            targets,
            ..self.clone()
        }
    }
}

/// One annotated correspondence: source keypoint and its ground-truth
/// location in the target image, both in image coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointPair {
    pub source: (f64, f64),
    pub target: (f64, f64),
}

/// Cosine similarity, clamped to [-1, 1]. Zero vectors score 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("dim {}", a.len()),
            format!("dim {}", b.len()),
        ));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += (*x as f64) * (*y as f64);
        na += (*x as f64) * (*x as f64);
        nb += (*y as f64) * (*y as f64);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(((dot / (na.sqrt() * nb.sqrt())) as f32).clamp(-1.0, 1.0))
}

/// For every source location, the target location maximizing cosine
/// similarity. Ties break to the first maximum in row-major scan order.
pub fn dense_match(content: &FeatureMap, style: &FeatureMap) -> Result<CorrespondenceMap> {
    let (ck, ch, cw) = content.data.dim();
    let (sk, sh, sw) = style.data.dim();
    if ck != sk {
        return Err(Error::shape("dense_match", format!("feature dim {ck}"), format!("{sk}")));
    }
    if ch == 0 || cw == 0 || sh == 0 || sw == 0 {
        return Err(Error::EmptyInput("dense_match: empty feature map".into()));
    }

    // Flatten to per-location descriptor slices.
    let gather = |map: &FeatureMap, h: usize, w: usize, k: usize| -> Vec<Vec<f32>> {
        let mut out = vec![vec![0.0f32; k]; h * w];
        for c in 0..k {
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x][c] = map.data[[c, y, x]];
                }
            }
        }
        out
    };
    let cvecs = gather(content, ch, cw, ck);
    let svecs = gather(style, sh, sw, sk);

    let mut targets = Vec::with_capacity(ch * cw);
    let mut scores = Vec::with_capacity(ch * cw);
    for cv in &cvecs {
        let mut best = 0usize;
        let mut best_score = f32::NEG_INFINITY;
        for (i, sv) in svecs.iter().enumerate() {
            let s = cosine_similarity(cv, sv)?;
            if s > best_score {
                best_score = s;
                best = i;
            }
        }
        targets.push((best / sw, best % sw));
        scores.push(best_score);
    }
    Ok(CorrespondenceMap {
        source_grid: (ch, cw),
        target_grid: (sh, sw),
        targets,
        scores,
        locator_used: content.locator.clone(),
    })
}

/// Fraction of keypoints whose predicted location lands within
/// `alpha * max(target_h, target_w)` of the ground truth.
///
/// Source keypoints map image -> grid by nearest-neighbor scaling;
/// predictions map grid -> image at cell centers.
pub fn pck_score(
    map: &CorrespondenceMap,
    keypoints: &[KeypointPair],
    source_image: (usize, usize),
    target_image: (usize, usize),
    alpha: f64,
) -> Result<f64> {
    if keypoints.is_empty() {
        return Err(Error::EmptyInput("pck_score: no keypoints".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Config(format!("pck alpha must be > 0, got {alpha}")));
    }
    let (gh, gw) = map.source_grid;
    let (tgh, tgw) = map.target_grid;
    let threshold = alpha * (target_image.0.max(target_image.1)) as f64;
    let mut correct = 0usize;
    for kp in keypoints {
        let (sx, sy) = kp.source;
        let gx = ((sx * gw as f64 / source_image.1 as f64).floor() as usize).min(gw - 1);
        let gy = ((sy * gh as f64 / source_image.0 as f64).floor() as usize).min(gh - 1);
        let (py, px) = map.lookup(gy, gx);
        let pred_x = (px as f64 + 0.5) * target_image.1 as f64 / tgw as f64;
        let pred_y = (py as f64 + 0.5) * target_image.0 as f64 / tgh as f64;
        let dist = ((pred_x - kp.target.0).powi(2) + (pred_y - kp.target.1).powi(2)).sqrt();
        if dist <= threshold {
            correct += 1;
        }
    }
    Ok(correct as f64 / keypoints.len() as f64)
}

/// One benchmark pair presented to the grid search.
#[derive(Debug, Clone)]
pub struct BenchmarkPair {
    pub id: String,
    pub keypoints: Vec<KeypointPair>,
    pub source_image: (usize, usize),
    pub target_image: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    /// (t, l) -> mean PCK, `None` when extraction failed for that cell.
    pub scores: BTreeMap<(usize, String), Option<f64>>,
    pub best: FeatureLocator,
    pub best_score: f64,
    pub alpha: f64,
}

/// Grid search over candidate timesteps and layers, scoring each cell by
/// mean per-image PCK. Ties break to the smaller t, then the
/// lexicographically smaller layer id.
///
/// `provider` yields (content features, style features) for a pair at a
/// given locator; a provider failure poisons only that cell.
pub fn grid_search<F>(
    pairs: &[BenchmarkPair],
    mut provider: F,
    timesteps: &[usize],
    layers: &[String],
    alpha: f64,
) -> Result<GridSearchResult>
where
    F: FnMut(&BenchmarkPair, &FeatureLocator) -> Result<(FeatureMap, FeatureMap)>,
{
    if pairs.is_empty() || timesteps.is_empty() || layers.is_empty() {
        return Err(Error::EmptyInput(
            "grid_search needs non-empty pairs, timesteps and layers".into(),
        ));
    }
    let mut scores: BTreeMap<(usize, String), Option<f64>> = BTreeMap::new();
    let mut best: Option<(f64, usize, String)> = None;
    for &t in timesteps {
        for l in layers {
            let locator = FeatureLocator {
                timestep: t,
                layer: l.clone(),
            };
            let mut cell_total = 0.0;
            let mut cell_ok = true;
            for pair in pairs {
                match provider(pair, &locator).and_then(|(fc, fs)| {
                    let map = dense_match(&fc, &fs)?;
                    pck_score(&map, &pair.keypoints, pair.source_image, pair.target_image, alpha)
                }) {
                    Ok(p) => cell_total += p,
                    Err(_) => {
                        cell_ok = false;
                        break;
                    }
                }
            }
            let cell = if cell_ok {
                let m = cell_total / pairs.len() as f64;
                let better = match &best {
                    None => true,
                    Some((bs, bt, bl)) => {
                        m > *bs || (m == *bs && (t < *bt || (t == *bt && l < bl)))
                    }
                };
                if better {
                    best = Some((m, t, l.clone()));
                }
                Some(m)
            } else {
                None
            };
            scores.insert((t, l.clone()), cell);
        }
    }
    let (best_score, bt, bl) =
        best.ok_or_else(|| Error::Numerical("grid_search: every cell failed".into()))?;
    Ok(GridSearchResult {
        scores,
        best: FeatureLocator {
            timestep: bt,
            layer: bl,
        },
        best_score,
        alpha,
    })
}

/// Persisted grid-search outcome: checkpoint id, chosen locator, alpha and
/// the full M table, in TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CachedLocator {
    pub checkpoint: String,
    pub timestep: usize,
    pub layer: String,
    pub alpha: f64,
    pub best_score: f64,
    /// "t/layer" -> score; failed cells are omitted.
    pub table: BTreeMap<String, f64>,
}

impl CachedLocator {
    pub fn from_result(checkpoint: &str, result: &GridSearchResult) -> Self {
        let table = result
            .scores
            .iter()
            .filter_map(|((t, l), v)| v.map(|s| (format!("{t}/{l}"), s)))
            .collect();
        Self {
            checkpoint: checkpoint.to_string(),
            timestep: result.best.timestep,
            layer: result.best.layer.clone(),
            alpha: result.alpha,
            best_score: result.best_score,
            table,
        }
    }

    pub fn locator(&self) -> FeatureLocator {
        FeatureLocator {
            timestep: self.timestep,
            layer: self.layer.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Manifest(format!("cached locator serialize: {e}")))?;
        crate::pipeline::record::atomic_write(path.as_ref(), |tmp| {
            std::fs::write(tmp, &text).map_err(Error::from)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Manifest(format!("cached locator parse: {e}")))
    }
}

/// One line of the keypoint manifest: an image pair plus its annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub source_path: String,
    pub target_path: String,
    pub keypoints: Vec<KeypointPair>,
}

/// Keypoint manifests are line-delimited JSON, one record per pair.
pub fn load_keypoint_manifest(path: impl AsRef<Path>) -> Result<Vec<KeypointRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let rec: KeypointRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Manifest(format!(
            "keypoint manifest {} has no records",
            path.display()
        )));
    }
    Ok(out)
}

pub fn save_keypoint_manifest(path: impl AsRef<Path>, records: &[KeypointRecord]) -> Result<()> {
    crate::pipeline::record::atomic_write(path.as_ref(), |tmp| {
        let mut f = std::fs::File::create(tmp)?;
        for r in records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::Manifest(format!("keypoint manifest serialize: {e}")))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    })
}
