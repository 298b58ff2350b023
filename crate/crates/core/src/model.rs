//! The full velocity network: input projections, timestep and sync
//! conditioning, the dual-stream stack followed by the audio-only stack, and
//! the output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ConditioningSignal, Init, Linear, MmditBlock, RepaHead, UniditBlock};
use crate::error::{Error, Result};
use crate::flow::CfgMask;
use crate::stubs::FeatureBundle;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Latent frame width of the audio codec.
pub const LATENT_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub sync_dim: usize,
    pub repa_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mmdit_blocks: usize,
    pub unidit_blocks: usize,
    /// 1-based index of the audio-only block whose output feeds the alignment head.
    /// `0` selects the default proportional placement.
    pub repa_layer: usize,
    pub rope_base: f32,
    pub timestep_base: f32,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            video_dim: 32,
            text_dim: 32,
            sync_dim: 32,
            repa_dim: 32,
            hidden_dim: 128,
            heads: 4,
            mmdit_blocks: 2,
            unidit_blocks: 4,
            repa_layer: 0,
            rope_base: 10000.0,
            timestep_base: 10000.0,
            ffn_mult: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size layout: 18 dual-stream and 36 audio-only blocks at width 1536 with 12 heads.
    pub fn full_scale() -> Self {
        Self {
            hidden_dim: 1536,
            heads: 12,
            mmdit_blocks: 18,
            unidit_blocks: 36,
            video_dim: 768,
            text_dim: 512,
            sync_dim: 768,
            repa_dim: 768,
            ..Self::default()
        }
    }

    /// Alignment layer, defaulting to `round(8/36 * unidit_blocks)` clamped to at least 1.
    pub fn resolved_repa_layer(&self) -> usize {
        if self.repa_layer > 0 {
            self.repa_layer
        } else {
            ((8.0 * self.unidit_blocks as f64 / 36.0).round() as usize).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} must be a positive multiple of heads {}", self.hidden_dim, self.heads));
        }
        if (self.hidden_dim / self.heads) % 2 != 0 {
            return bad(format!("head width {} must be even", self.hidden_dim / self.heads));
        }
        if self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even".into());
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("sync_dim", self.sync_dim),
            ("repa_dim", self.repa_dim),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.unidit_blocks == 0 {
            return bad("unidit_blocks must be at least 1".into());
        }
        if self.resolved_repa_layer() > self.unidit_blocks {
            return bad(format!("repa_layer {} exceeds unidit_blocks {}", self.repa_layer, self.unidit_blocks));
        }
        Ok(())
    }
}

/// Velocity prediction plus the hidden state captured for the alignment head.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub velocity: Tensor,
    pub repa_hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct Embedders {
    pub latent: Linear,
    pub video: Linear,
    pub text: Linear,
    pub sync: Linear,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub null_video: ParamId,
    pub null_text: ParamId,
    pub null_sync: ParamId,
}

#[derive(Debug, Clone)]
pub struct FoleyModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: Embedders,
    pub mmdit: Vec<MmditBlock>,
    pub unidit: Vec<UniditBlock>,
    pub repa_head: RepaHead,
    pub out: Linear,
}

/// `[B, 1, D]` sinusoidal embedding of `t * 1000`: cosines then sines.
pub fn timestep_embedding(t: &[f32], dim: usize, base: f32) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("timestep embedding width {dim} must be even")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let s = tv as f64 * 1000.0;
        let freqs = (0..half).map(|i| (base as f64).powf(-(i as f64) / half as f64));
        let angles: Vec<f64> = freqs.map(|f| s * f).collect();
        data.extend(angles.iter().map(|a| a.cos() as f32));
        data.extend(angles.iter().map(|a| a.sin() as f32));
    }
    Tensor::new(data, &[t.len(), 1, dim])
}

fn keep_mask(mask: &[CfgMask], pick: impl Fn(&CfgMask) -> bool) -> Tensor {
    let data: Vec<f32> = mask.iter().map(|m| if pick(m) { 0.0 } else { 1.0 }).collect();
    Tensor::new(data, &[mask.len(), 1, 1]).expect("mask shape")
}

/// `x * keep + null * (1 - keep)` per batch element.
fn substitute_null(x: &Tensor, null: &Tensor, keep: &Tensor) -> Result<Tensor> {
    if keep.data().iter().all(|k| *k == 1.0) {
        return Ok(x.clone());
    }
    let drop = keep.neg().add_scalar(1.0);
    x.mul(keep)?.add(&null.mul(&drop)?)
}

impl FoleyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let hidden = d * config.ffn_mult;
        let rng = &mut rng;

        let embed = Embedders {
            latent: Linear::new(&mut store, "embed.latent", config.latent_dim, d, true, Init::Xavier, rng)?,
            video: Linear::new(&mut store, "embed.video", config.video_dim, d, true, Init::Xavier, rng)?,
            text: Linear::new(&mut store, "embed.text", config.text_dim, d, true, Init::Xavier, rng)?,
            sync: Linear::new(&mut store, "embed.sync", config.sync_dim, d, true, Init::Xavier, rng)?,
            time_fc1: Linear::new(&mut store, "embed.time.fc1", d, d, true, Init::Xavier, rng)?,
            time_fc2: Linear::new(&mut store, "embed.time.fc2", d, d, true, Init::Xavier, rng)?,
            null_video: store.insert("null.video", Tensor::randn(&[d], 0.02, rng).to_vec(), &[d])?,
            null_text: store.insert("null.text", Tensor::randn(&[d], 0.02, rng).to_vec(), &[d])?,
            null_sync: store.insert("null.sync", Tensor::randn(&[d], 0.02, rng).to_vec(), &[d])?,
        };
        let mmdit = (0..config.mmdit_blocks)
            .map(|i| MmditBlock::new(&mut store, &format!("mmdit.{i}"), d, config.heads, hidden, config.rope_base, rng))
            .collect::<Result<Vec<_>>>()?;
        let unidit = (0..config.unidit_blocks)
            .map(|j| UniditBlock::new(&mut store, &format!("unidit.{j}"), d, config.heads, hidden, config.rope_base, rng))
            .collect::<Result<Vec<_>>>()?;
        let repa_head = RepaHead::new(&mut store, "repa", d, config.repa_dim, rng)?;
        let out = Linear::new(&mut store, "out", d, config.latent_dim, false, Init::Xavier, rng)?;
        Ok(Self { config, store, embed, mmdit, unidit, repa_head, out })
    }

    /// Names of every zero-initialized modulation weight.
    pub fn modulation_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| {
                let n = self.store.name(*id);
                n.ends_with(".w_alpha") || n.ends_with(".w_beta") || n.ends_with(".w_gate")
            })
            .collect()
    }

    pub fn forward(&self, x_t: &Tensor, t: &[f32], bundle: &FeatureBundle) -> Result<ModelOutput> {
        self.forward_with(&self.store, x_t, t, bundle)
    }

    /// Forward pass reading weights from `store`, which must share this model's layout.
    pub fn forward_with(&self, store: &ParamStore, x_t: &Tensor, t: &[f32], bundle: &FeatureBundle) -> Result<ModelOutput> {
        let cfg = &self.config;
        let b = x_t.dim(0);
        if x_t.rank() != 3 || x_t.dim(2) != cfg.latent_dim {
            return Err(Error::shape("model input", x_t.shape(), &[b, 0, cfg.latent_dim]));
        }
        bundle.check_batch(b)?;
        if t.len() != b {
            return Err(Error::InvalidArgument(format!("{} timesteps for batch of {b}", t.len())));
        }
        let (la, lv) = (x_t.dim(1), bundle.video.dim(1));
        let e = &self.embed;

        let x = e.latent.forward(store, x_t)?;
        let fv = e.video.forward(store, &bundle.video)?;
        let fv = substitute_null(&fv, store.get(e.null_video), &keep_mask(&bundle.drop, |m| m.drop_video))?;
        let ft = e.text.forward(store, &bundle.text)?;
        let ft = substitute_null(&ft, store.get(e.null_text), &keep_mask(&bundle.drop, |m| m.drop_text))?;

        let keep_sync = keep_mask(&bundle.drop, |m| m.drop_sync);
        let null_sync = store.get(e.null_sync);
        let sync_a = e.sync.forward(store, &bundle.sync.interp_nearest(la, 1)?)?;
        let sync_a = substitute_null(&sync_a, null_sync, &keep_sync)?;
        let sync_v = e.sync.forward(store, &bundle.sync.interp_nearest(lv, 1)?)?;
        let sync_v = substitute_null(&sync_v, null_sync, &keep_sync)?;

        let temb = timestep_embedding(t, cfg.hidden_dim, cfg.timestep_base)?;
        let c_t = e.time_fc2.forward(store, &e.time_fc1.forward(store, &temb)?.silu())?;
        let cond_a = ConditioningSignal::new(&sync_a, &c_t)?;
        let cond_v = ConditioningSignal::new(&sync_v, &c_t)?;

        let (mut x, mut fv) = (x, fv);
        for block in &self.mmdit {
            (x, fv) = block.forward(store, &x, &fv, &ft, &cond_a, &cond_v)?;
        }
        let capture = cfg.resolved_repa_layer();
        let mut repa_hidden = None;
        for (j, block) in self.unidit.iter().enumerate() {
            x = block.forward(store, &x, &cond_a)?;
            if j + 1 == capture {
                repa_hidden = Some(x.clone());
            }
        }
        let repa_hidden = repa_hidden.ok_or_else(|| Error::Config("alignment layer not reached".into()))?;
        Ok(ModelOutput { velocity: self.out.forward(store, &x)?, repa_hidden })
    }
}
