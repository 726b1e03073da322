//! Attention hooks: the mechanism through which stylization observes and
//! rewrites the backbone's self-attention blocks during sampling.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

use super::{AttentionBundle, AttentionRecord, CheckpointInfo};

/// Where in the forward pass a hook is being invoked.
#[derive(Debug, Clone)]
pub struct AttnSite {
    pub block: String,
    /// Diffusion timestep of the forward pass.
    pub timestep: usize,
    /// 1-based index of the denoising step within the sampling loop;
    /// 0 for standalone forward passes.
    pub step_index: usize,
}

pub trait AttentionHook {
    /// Block ids this hook registers for. Must all exist on the checkpoint.
    fn blocks(&self) -> Vec<String>;

    /// Observe block features before attention.
    fn on_features(&mut self, _site: &AttnSite, _features: &Array3<f32>) -> Result<()> {
        Ok(())
    }

    /// Observe or replace K/V before the attention product.
    fn on_qkv(
        &mut self,
        _site: &AttnSite,
        _q: &Array2<f32>,
        _k: &mut Array2<f32>,
        _v: &mut Array2<f32>,
    ) -> Result<()> {
        Ok(())
    }

    /// Attention temperature override for this site; `None` keeps the
    /// model's default of 1.
    fn temperature(&self, _site: &AttnSite) -> Option<f64> {
        None
    }

    /// Observe or rewrite the attention output, reshaped to `(c, h, w)`.
    fn on_attention_output(&mut self, _site: &AttnSite, _output: &mut Array3<f32>) -> Result<()> {
        Ok(())
    }
}

/// Ordered hook set dispatched by the backbone's forward pass. Hooks are
/// borrowed so callers can read captured state back after sampling.
#[derive(Default)]
pub struct HookSet<'a> {
    hooks: Vec<&'a mut dyn AttentionHook>,
}

impl<'a> HookSet<'a> {
    pub fn new() -> Self {
        Self { hooks: Vec::new() }
    }

    pub fn push(&mut self, hook: &'a mut dyn AttentionHook) {
        self.hooks.push(hook);
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    /// Every registered block must exist on the checkpoint. Called before
    /// sampling begins so misconfiguration fails fast.
    pub fn validate(&self, info: &CheckpointInfo) -> Result<()> {
        for hook in &self.hooks {
            for block in hook.blocks() {
                if !info.blocks.iter().any(|b| b.id == block) {
                    return Err(Error::UnknownBlock(block));
                }
            }
        }
        Ok(())
    }

    fn registered(&self, idx: usize, block: &str) -> bool {
        self.hooks[idx].blocks().iter().any(|b| b == block)
    }

    pub fn dispatch_features(&mut self, site: &AttnSite, features: &Array3<f32>) -> Result<()> {
        for i in 0..self.hooks.len() {
            if self.registered(i, &site.block) {
                self.hooks[i].on_features(site, features)?;
            }
        }
        Ok(())
    }

    pub fn dispatch_qkv(
        &mut self,
        site: &AttnSite,
        q: &Array2<f32>,
        k: &mut Array2<f32>,
        v: &mut Array2<f32>,
    ) -> Result<()> {
        for i in 0..self.hooks.len() {
            if self.registered(i, &site.block) {
                self.hooks[i].on_qkv(site, q, k, v)?;
            }
        }
        Ok(())
    }

    pub fn temperature(&self, site: &AttnSite) -> f64 {
        let mut gamma = 1.0;
        for (i, hook) in self.hooks.iter().enumerate() {
            if self.registered(i, &site.block) {
                if let Some(g) = hook.temperature(site) {
                    gamma = g;
                }
            }
        }
        gamma
    }

    pub fn dispatch_attention_output(
        &mut self,
        site: &AttnSite,
        output: &mut Array3<f32>,
    ) -> Result<()> {
        for i in 0..self.hooks.len() {
            if self.registered(i, &site.block) {
                self.hooks[i].on_attention_output(site, output)?;
            }
        }
        Ok(())
    }
}

/// Pure observer that captures per-block features at one timestep.
pub struct FeatureCaptureHook {
    blocks: Vec<String>,
    pub captured: BTreeMap<String, Array3<f32>>,
}

impl FeatureCaptureHook {
    pub fn new(blocks: Vec<String>) -> Self {
        Self {
            blocks,
            captured: BTreeMap::new(),
        }
    }
}

impl AttentionHook for FeatureCaptureHook {
    fn blocks(&self) -> Vec<String> {
        self.blocks.clone()
    }

    fn on_features(&mut self, site: &AttnSite, features: &Array3<f32>) -> Result<()> {
        self.captured.insert(site.block.clone(), features.clone());
        Ok(())
    }
}

/// Pure observer that captures Q/K/V for every block it registers for.
pub struct QkvCaptureHook {
    blocks: Vec<String>,
    pub records: Vec<AttentionRecord>,
}

impl QkvCaptureHook {
    pub fn new(blocks: Vec<String>) -> Self {
        Self {
            blocks,
            records: Vec::new(),
        }
    }

    pub fn into_bundle(self, timestep: usize) -> AttentionBundle {
        AttentionBundle {
            timestep,
            records: self.records,
        }
    }
}

impl AttentionHook for QkvCaptureHook {
    fn blocks(&self) -> Vec<String> {
        self.blocks.clone()
    }

    fn on_qkv(
        &mut self,
        site: &AttnSite,
        q: &Array2<f32>,
        k: &mut Array2<f32>,
        v: &mut Array2<f32>,
    ) -> Result<()> {
        self.records.push(AttentionRecord {
            block: site.block.clone(),
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            heads: 1,
            head_dim: q.ncols(),
        });
        Ok(())
    }
}

/// Captures the (unmodified) attention output per block per timestep.
pub struct AttentionOutputCaptureHook {
    blocks: Vec<String>,
    pub captured: BTreeMap<(usize, String), Array3<f32>>,
}

impl AttentionOutputCaptureHook {
    pub fn new(blocks: Vec<String>) -> Self {
        Self {
            blocks,
            captured: BTreeMap::new(),
        }
    }
}

impl AttentionHook for AttentionOutputCaptureHook {
    fn blocks(&self) -> Vec<String> {
        self.blocks.clone()
    }

    fn on_attention_output(&mut self, site: &AttnSite, output: &mut Array3<f32>) -> Result<()> {
        self.captured
            .insert((site.timestep, site.block.clone()), output.clone());
        Ok(())
    }
}

/// Captures K/V per block per timestep without modifying them.
pub struct KvCaptureHook {
    blocks: Vec<String>,
    pub captured: BTreeMap<(usize, String), (Array2<f32>, Array2<f32>)>,
}

impl KvCaptureHook {
    pub fn new(blocks: Vec<String>) -> Self {
        Self {
            blocks,
            captured: BTreeMap::new(),
        }
    }
}

impl AttentionHook for KvCaptureHook {
    fn blocks(&self) -> Vec<String> {
        self.blocks.clone()
    }

    fn on_qkv(
        &mut self,
        site: &AttnSite,
        _q: &Array2<f32>,
        k: &mut Array2<f32>,
        v: &mut Array2<f32>,
    ) -> Result<()> {
        self.captured
            .insert((site.timestep, site.block.clone()), (k.clone(), v.clone()));
        Ok(())
    }
}

/// Replaces K/V with a precomputed style stream and applies the attention
/// temperature at the swapped blocks.
pub struct KvSwapHook {
    blocks: Vec<String>,
    /// (timestep, block) -> (K, V) from the style stream.
    pub source: BTreeMap<(usize, String), (Array2<f32>, Array2<f32>)>,
    pub gamma: f64,
}

impl KvSwapHook {
    pub fn new(
        blocks: Vec<String>,
        source: BTreeMap<(usize, String), (Array2<f32>, Array2<f32>)>,
        gamma: f64,
    ) -> Self {
        Self {
            blocks,
            source,
            gamma,
        }
    }
}

impl AttentionHook for KvSwapHook {
    fn blocks(&self) -> Vec<String> {
        self.blocks.clone()
    }

    fn on_qkv(
        &mut self,
        site: &AttnSite,
        _q: &Array2<f32>,
        k: &mut Array2<f32>,
        v: &mut Array2<f32>,
    ) -> Result<()> {
        if let Some((ks, vs)) = self.source.get(&(site.timestep, site.block.clone())) {
            if ks.dim() != k.dim() || vs.dim() != v.dim() {
                return Err(Error::shape(
                    format!("kv swap at {}/{}", site.timestep, site.block),
                    format!("{:?}/{:?}", k.dim(), v.dim()),
                    format!("{:?}/{:?}", ks.dim(), vs.dim()),
                ));
            }
            k.assign(ks);
            v.assign(vs);
        }
        Ok(())
    }

    fn temperature(&self, _site: &AttnSite) -> Option<f64> {
        Some(self.gamma)
    }
}
