//! Transformer blocks: the dual-stream audio-visual block, the audio-only
//! block, condition-driven adaptive LayerNorm with gated residuals, and the
//! representation-alignment projection head.
//!
//! Every residual branch is scaled by a gate computed from the condition
//! signal through zero-initialized weights, so a freshly built block is an
//! exact identity map.

use rand::Rng;

use crate::attention::{
    apply_rope, consecutive_positions, cross_attention, joint_self_attention, merge_heads, split_heads,
    RopeConfig, StreamQkv,
};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
}

fn init_data<R: Rng + ?Sized>(init: Init, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; fan_in * fan_out],
        Init::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
            (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect()
        }
    }
}

/// `y = x W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), init_data(init, in_dim, out_dim, rng), &[in_dim, out_dim])?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), vec![0.0; out_dim], &[out_dim])?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(store.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(store.get(b)),
            None => Ok(y),
        }
    }
}

/// The composite condition `c = c_sync + c_t` for one stream, `[B, L, D]`.
#[derive(Debug, Clone)]
pub struct ConditioningSignal {
    pub c: Tensor,
}

impl ConditioningSignal {
    /// `c_sync: [B, L, D]` plus a timestep embedding `c_t: [B, 1, D]` broadcast over time.
    pub fn new(c_sync: &Tensor, c_t: &Tensor) -> Result<Self> {
        if c_t.rank() != 3 || c_t.dim(1) != 1 {
            return Err(Error::shape("conditioning", c_sync.shape(), c_t.shape()));
        }
        Ok(Self { c: c_sync.add(c_t)? })
    }
}

#[derive(Debug, Clone)]
pub struct ModulationParams {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub gate: Tensor,
}

/// Three parallel zero-initialized `[D, D]` maps from `SiLU(c)` to scale, shift and gate.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub w_alpha: ParamId,
    pub w_beta: ParamId,
    pub w_gate: ParamId,
}

impl Modulation {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let mut zero = |suffix: &str| store.insert(format!("{name}.{suffix}"), vec![0.0; dim * dim], &[dim, dim]);
        Ok(Self {
            w_alpha: zero("w_alpha")?,
            w_beta: zero("w_beta")?,
            w_gate: zero("w_gate")?,
        })
    }

    pub fn params(&self, store: &ParamStore, cond: &ConditioningSignal) -> Result<ModulationParams> {
        let s = cond.c.silu();
        Ok(ModulationParams {
            alpha: s.matmul(store.get(self.w_alpha))?,
            beta: s.matmul(store.get(self.w_beta))?,
            gate: s.matmul(store.get(self.w_gate))?,
        })
    }
}

/// `LayerNorm(y) * (1 + alpha) + beta`.
pub fn modulate(y: &Tensor, mp: &ModulationParams) -> Result<Tensor> {
    y.layer_norm(LAYER_NORM_EPS)?.mul(&mp.alpha.add_scalar(1.0))?.add(&mp.beta)
}

/// `y + branch * gate`.
pub fn gated_residual(y: &Tensor, branch: &Tensor, gate: &Tensor) -> Result<Tensor> {
    y.add(&branch.mul(gate)?)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, Init::Xavier, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, Init::Xavier, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(store, &self.fc1.forward(store, x)?.gelu())
    }
}

/// Bias-free q/k/v/out projections for one attention site.
#[derive(Debug, Clone)]
pub struct AttentionProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionProj {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), dim, dim, false, Init::Xavier, rng);
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            out: lin("out")?,
        })
    }

    fn qkv(&self, store: &ParamStore, x: &Tensor, heads: usize) -> Result<StreamQkv> {
        Ok(StreamQkv {
            q: split_heads(&self.q.forward(store, x)?, heads)?,
            k: split_heads(&self.k.forward(store, x)?, heads)?,
            v: split_heads(&self.v.forward(store, x)?, heads)?,
        })
    }
}

/// Weights owned by one stream of a dual-stream block.
#[derive(Debug, Clone)]
pub struct StreamWeights {
    pub attn_mod: Modulation,
    pub attn: AttentionProj,
    pub cross_mod: Modulation,
    pub ffn_mod: Modulation,
    pub ffn: FeedForward,
}

impl StreamWeights {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ffn_hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn_mod: Modulation::new(store, &format!("{name}.attn_mod"), dim)?,
            attn: AttentionProj::new(store, &format!("{name}.attn"), dim, rng)?,
            cross_mod: Modulation::new(store, &format!("{name}.cross_mod"), dim)?,
            ffn_mod: Modulation::new(store, &format!("{name}.ffn_mod"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_hidden, rng)?,
        })
    }
}

/// Dual-stream block: joint audio-visual self-attention, then text
/// cross-attention over the concatenated streams, then per-stream FFNs.
#[derive(Debug, Clone)]
pub struct MmditBlock {
    pub audio: StreamWeights,
    pub visual: StreamWeights,
    pub cross: AttentionProj,
    pub heads: usize,
    pub rope: RopeConfig,
}

impl MmditBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rope_base: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("hidden dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            audio: StreamWeights::new(store, &format!("{name}.audio"), dim, ffn_hidden, rng)?,
            visual: StreamWeights::new(store, &format!("{name}.visual"), dim, ffn_hidden, rng)?,
            cross: AttentionProj::new(store, &format!("{name}.cross"), dim, rng)?,
            heads,
            rope: RopeConfig::new(dim / heads, rope_base)?,
        })
    }

    /// `x: [B, L_a, D]`, `f_v: [B, L_v, D]`, `f_t: [B, L_t, D]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        f_v: &Tensor,
        f_t: &Tensor,
        cond_a: &ConditioningSignal,
        cond_v: &ConditioningSignal,
    ) -> Result<(Tensor, Tensor)> {
        let (a, v) = (&self.audio, &self.visual);

        // joint self-attention
        let ma = a.attn_mod.params(store, cond_a)?;
        let mv = v.attn_mod.params(store, cond_v)?;
        let qkv_a = a.attn.qkv(store, &modulate(x, &ma)?, self.heads)?;
        let qkv_v = v.attn.qkv(store, &modulate(f_v, &mv)?, self.heads)?;
        let (oa, ov) = joint_self_attention(&qkv_a, &qkv_v, &self.rope)?;
        let x = gated_residual(x, &a.attn.out.forward(store, &merge_heads(&oa)?)?, &ma.gate)?;
        let f_v = gated_residual(f_v, &v.attn.out.forward(store, &merge_heads(&ov)?)?, &mv.gate)?;

        // text cross-attention
        let la = x.dim(1);
        let ma = a.cross_mod.params(store, cond_a)?;
        let mv = v.cross_mod.params(store, cond_v)?;
        let q_seq = Tensor::concat(&[modulate(&x, &ma)?, modulate(&f_v, &mv)?], 1)?;
        let q = split_heads(&self.cross.q.forward(store, &q_seq)?, self.heads)?;
        let k = split_heads(&self.cross.k.forward(store, f_t)?, self.heads)?;
        let val = split_heads(&self.cross.v.forward(store, f_t)?, self.heads)?;
        let o = self.cross.out.forward(store, &merge_heads(&cross_attention(&q, &k, &val)?)?)?;
        let x = gated_residual(&x, &o.narrow(1, 0, la)?, &ma.gate)?;
        let f_v = gated_residual(&f_v, &o.narrow(1, la, o.dim(1) - la)?, &mv.gate)?;

        // feed-forward
        let ma = a.ffn_mod.params(store, cond_a)?;
        let mv = v.ffn_mod.params(store, cond_v)?;
        let x = gated_residual(&x, &a.ffn.forward(store, &modulate(&x, &ma)?)?, &ma.gate)?;
        let f_v = gated_residual(&f_v, &v.ffn.forward(store, &modulate(&f_v, &mv)?)?, &mv.gate)?;
        Ok((x, f_v))
    }
}

/// Audio-only block: self-attention with RoPE over consecutive positions, then an FFN.
#[derive(Debug, Clone)]
pub struct UniditBlock {
    pub attn_mod: Modulation,
    pub attn: AttentionProj,
    pub ffn_mod: Modulation,
    pub ffn: FeedForward,
    pub heads: usize,
    pub rope: RopeConfig,
}

impl UniditBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rope_base: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("hidden dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            attn_mod: Modulation::new(store, &format!("{name}.attn_mod"), dim)?,
            attn: AttentionProj::new(store, &format!("{name}.attn"), dim, rng)?,
            ffn_mod: Modulation::new(store, &format!("{name}.ffn_mod"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_hidden, rng)?,
            heads,
            rope: RopeConfig::new(dim / heads, rope_base)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, cond: &ConditioningSignal) -> Result<Tensor> {
        let m = self.attn_mod.params(store, cond)?;
        let qkv = self.attn.qkv(store, &modulate(x, &m)?, self.heads)?;
        let pos = consecutive_positions(x.dim(1));
        let q = apply_rope(&qkv.q, &self.rope, &pos)?;
        let k = apply_rope(&qkv.k, &self.rope, &pos)?;
        let o = crate::attention::attention(&q, &k, &qkv.v)?;
        let x = gated_residual(x, &self.attn.out.forward(store, &merge_heads(&o)?)?, &m.gate)?;

        let m = self.ffn_mod.params(store, cond)?;
        gated_residual(&x, &self.ffn.forward(store, &modulate(&x, &m)?)?, &m.gate)
    }
}

/// Two-layer GELU MLP from the hidden width to the alignment-target width.
#[derive(Debug, Clone)]
pub struct RepaHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl RepaHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, true, Init::Xavier, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, out_dim, true, Init::Xavier, rng)?,
        })
    }

    /// `h: [B, L_a, D] -> [B, L_a, D_r]`.
    pub fn project(&self, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        self.fc2.forward(store, &self.fc1.forward(store, h)?.gelu())
    }
}

/// Projects a captured hidden state through the head, failing if none was captured.
pub fn repa_project(h: Option<&Tensor>, head: &RepaHead, store: &ParamStore) -> Result<Tensor> {
    let h = h.ok_or_else(|| Error::InvalidArgument("no hidden state captured for the alignment head".into()))?;
    head.project(store, h)
}
