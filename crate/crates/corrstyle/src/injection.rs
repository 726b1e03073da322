//! KV-swap stylization, correspondence-weighted attention-feature
//! injection, and the timestep gate that controls when injection runs.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::correspondence::CorrespondenceMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    /// Injection weight w.
    pub w: f64,
    /// Attention temperature, applied only inside KV-swap attention.
    pub gamma: f64,
    /// 1-based completed-denoising-step index at which injection activates.
    pub start_step: usize,
    /// Self-attention blocks receiving KV swap + injection.
    pub target_blocks: Vec<String>,
    /// Optional per-match modulation of w by the correspondence cosine score.
    #[serde(default)]
    pub score_modulated: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            w: 0.6,
            gamma: 0.7,
            start_step: 49,
            target_blocks: vec!["up.2".to_string()],
            score_modulated: false,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.w < 0.0 {
            return Err(Error::Config(format!("injection.w must be >= 0, got {}", self.w)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "injection.gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.start_step < 1 || self.start_step > total_steps {
            return Err(Error::Config(format!(
                "injection.start_step must be in [1, {total_steps}], got {}",
                self.start_step
            )));
        }
        if self.target_blocks.is_empty() {
            return Err(Error::Config("injection.blocks must be non-empty".into()));
        }
        Ok(())
    }
}

/// `softmax(Q K^T / (gamma * sqrt(d))) V` for one head.
///
/// `q` is (n_q, d), `k` is (n_k, d), `v` is (n_k, d_v).
pub fn kv_swap_attention(
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    gamma: f64,
) -> Result<Array2<f32>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(
            "kv_swap_attention: head dim",
            format!("{}", q.ncols()),
            format!("{}", k.ncols()),
        ));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(
            "kv_swap_attention: token count",
            format!("{}", k.nrows()),
            format!("{}", v.nrows()),
        ));
    }
    if gamma <= 0.0 {
        return Err(Error::Config(format!("gamma must be > 0, got {gamma}")));
    }
    let d = q.ncols() as f64;
    let scale = (1.0 / (gamma * d.sqrt())) as f32;
    let weights = attention_weights(q, k, scale);
    Ok(weights.dot(v))
}

/// Row-stochastic attention matrix for the given logit scale.
pub fn attention_weights(q: &Array2<f32>, k: &Array2<f32>, scale: f32) -> Array2<f32> {
    let logits = q.dot(&k.t()).mapv(|v| v * scale);
    let (nq, nk) = logits.dim();
    let mut out = Array2::zeros((nq, nk));
    for i in 0..nq {
        let row = logits.row(i);
        let maxv = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f32;
        for j in 0..nk {
            let e = (row[j] - maxv).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..nk {
            out[[i, j]] /= sum;
        }
    }
    out
}

/// Correspondence-weighted injection:
/// `out[k][p_c] = feat[k][p_c] + w_eff * attn[k][map(p_c)]`
/// where `w_eff = w` or, in score-modulated mode, `w * score(p_c)`.
pub fn inject_correspondence(
    feat: &Array3<f32>,
    attn: &Array3<f32>,
    map: &CorrespondenceMap,
    w: f64,
    score_modulated: bool,
) -> Result<Array3<f32>> {
    let (fc, fh, fw) = feat.dim();
    let (ac, ah, aw) = attn.dim();
    if fc != ac {
        return Err(Error::shape(
            "inject_correspondence: channels",
            format!("{fc}"),
            format!("{ac}"),
        ));
    }
    if map.source_grid != (fh, fw) {
        return Err(Error::shape(
            "inject_correspondence: map source grid",
            format!("{fh}x{fw}"),
            format!("{}x{}", map.source_grid.0, map.source_grid.1),
        ));
    }
    // The attention grid may differ from the map's target grid; reconcile by
    // nearest-neighbor rescaling of the target coordinates.
    let map = map.rescale_targets((ah, aw));
    let mut out = feat.clone();
    if w == 0.0 {
        return Ok(out);
    }
    for y in 0..fh {
        for x in 0..fw {
            let (ty, tx) = map.lookup(y, x);
            let w_eff = if score_modulated {
                w * map.score(y, x).max(0.0) as f64
            } else {
                w
            } as f32;
            for c in 0..fc {
                out[[c, y, x]] += w_eff * attn[[c, ty, tx]];
            }
        }
    }
    Ok(out)
}

/// True when injection is active at the given 1-based completed step.
pub fn injection_active(current_step: usize, config: &InjectionConfig) -> bool {
    current_step >= config.start_step
}
