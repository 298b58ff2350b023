//! Rotary position embeddings over an interleaved audio-visual sequence, and
//! the attention primitives used by the transformer blocks.
//!
//! Tensors in this module are laid out `[batch, time, heads, head_dim]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f32,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f32) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("rope head_dim must be even, got {head_dim}")));
        }
        if !(base > 0.0) {
            return Err(Error::InvalidArgument(format!("rope base must be positive, got {base}")));
        }
        Ok(Self { head_dim, base })
    }

    /// `theta_j = base^(-2j / head_dim)` for `j < head_dim / 2`, strictly decreasing.
    pub fn frequencies(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 2)
            .map(|j| (self.base as f64).powf(-2.0 * j as f64 / d))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    Audio,
    Visual,
}

/// Audio and visual tokens alternated along time at a shared aligned length.
#[derive(Debug, Clone)]
pub struct InterleavedSequence {
    /// `[B, 2L, H, Dh]`; slot `2t` is audio step `t`, slot `2t + 1` is visual step `t`.
    pub joint: Tensor,
    pub aligned_len: usize,
    pub origin: Vec<TokenOrigin>,
}

fn check_rank4(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 4 {
        return Err(Error::shape(op, t.shape(), &[0, 0, 0, 0]));
    }
    Ok(())
}

/// Nearest-neighbour aligns both streams to `max(L_a, L_v)` and alternates them audio-first.
pub fn interleave_av(audio: &Tensor, visual: &Tensor) -> Result<InterleavedSequence> {
    check_rank4("interleave_av", audio)?;
    check_rank4("interleave_av", visual)?;
    let (a, v) = (audio.shape(), visual.shape());
    if a[0] != v[0] || a[2] != v[2] || a[3] != v[3] {
        return Err(Error::shape("interleave_av", a, v));
    }
    if a[1] == 0 || v[1] == 0 {
        return Err(Error::Empty("interleave_av stream of length zero"));
    }
    let len = a[1].max(v[1]);
    let both = Tensor::concat(&[audio.interp_nearest(len, 1)?, visual.interp_nearest(len, 1)?], 1)?;
    let order: Vec<usize> = (0..len).flat_map(|t| [t, len + t]).collect();
    Ok(InterleavedSequence {
        joint: both.index_select(1, &order)?,
        aligned_len: len,
        origin: (0..len).flat_map(|_| [TokenOrigin::Audio, TokenOrigin::Visual]).collect(),
    })
}

/// Splits an interleaved sequence back into `(audio, visual)`, both at the aligned length.
pub fn deinterleave(seq: &InterleavedSequence) -> Result<(Tensor, Tensor)> {
    let len = seq.aligned_len;
    let evens: Vec<usize> = (0..len).map(|t| 2 * t).collect();
    let odds: Vec<usize> = (0..len).map(|t| 2 * t + 1).collect();
    Ok((seq.joint.index_select(1, &evens)?, seq.joint.index_select(1, &odds)?))
}

/// Rotates each `(j, j + Dh/2)` channel pair of the token at `positions[t]`
/// by angle `positions[t] * theta_j`.
pub fn apply_rope(seq: &Tensor, cfg: &RopeConfig, positions: &[f32]) -> Result<Tensor> {
    check_rank4("apply_rope", seq)?;
    let (t_len, dh) = (seq.dim(1), seq.dim(3));
    if dh % 2 != 0 {
        return Err(Error::InvalidArgument(format!("apply_rope: odd head dim {dh}")));
    }
    if dh != cfg.head_dim {
        return Err(Error::shape("apply_rope", seq.shape(), &[cfg.head_dim]));
    }
    if positions.len() != t_len {
        return Err(Error::shape("apply_rope", &[t_len], &[positions.len()]));
    }
    let half = dh / 2;
    let freqs = cfg.frequencies();
    let mut cos = vec![0.0f32; t_len * dh];
    let mut sin = vec![0.0f32; t_len * dh];
    for (t, &p) in positions.iter().enumerate() {
        for (j, f) in freqs.iter().enumerate() {
            let angle = p as f64 * f;
            let (s, c) = angle.sin_cos();
            cos[t * dh + j] = c as f32;
            cos[t * dh + j + half] = c as f32;
            sin[t * dh + j] = -s as f32;
            sin[t * dh + j + half] = s as f32;
        }
    }
    let cos = Tensor::new(cos, &[t_len, 1, dh])?;
    let sin = Tensor::new(sin, &[t_len, 1, dh])?;
    let swap: Vec<usize> = (half..dh).chain(0..half).collect();
    let rotated = seq.index_select(3, &swap)?;
    seq.mul(&cos)?.add(&rotated.mul(&sin)?)
}

pub(crate) fn consecutive_positions(n: usize) -> Vec<f32> {
    (0..n).map(|i| i as f32).collect()
}

/// Scaled dot-product attention without a mask. Returns `(output, weights)`
/// with weights laid out `[B, H, Tq, Tk]`.
pub fn attention_with_weights(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    for t in [q, k, v] {
        check_rank4("attention", t)?;
    }
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs[0] != ks[0] || qs[2] != ks[2] || qs[3] != ks[3] {
        return Err(Error::shape("attention", qs, ks));
    }
    if ks[..3] != vs[..3] {
        return Err(Error::shape("attention", ks, vs));
    }
    if ks[1] == 0 {
        return Err(Error::Empty("attention over zero keys"));
    }
    let scale = 1.0 / (qs[3] as f32).sqrt();
    let qh = q.permute(&[0, 2, 1, 3])?;
    let kt = k.permute(&[0, 2, 3, 1])?;
    let vh = v.permute(&[0, 2, 1, 3])?;
    let weights = qh.matmul(&kt)?.scale(scale).softmax(3)?;
    let out = weights.matmul(&vh)?.permute(&[0, 2, 1, 3])?;
    Ok((out, weights))
}

pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    attention_with_weights(q, k, v).map(|(o, _)| o)
}

/// Per-stream projected queries, keys and values, each `[B, L, H, Dh]`.
#[derive(Debug, Clone)]
pub struct StreamQkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Joint audio-visual self-attention.
///
/// Queries and keys are interleaved, rotated at consecutive positions
/// `0..2L`, and split apart again. Both streams are then concatenated
/// (audio first) into one `2L`-token sequence that attends to itself. The
/// outputs are resampled from the aligned length back to each stream's own
/// length; when `L_a == L_v` that resampling is the identity.
pub fn joint_self_attention(audio: &StreamQkv, visual: &StreamQkv, rope: &RopeConfig) -> Result<(Tensor, Tensor)> {
    let (la, lv) = (audio.q.dim(1), visual.q.dim(1));
    let rotate = |a: &Tensor, v: &Tensor| -> Result<(Tensor, Tensor)> {
        let mut seq = interleave_av(a, v)?;
        let positions = consecutive_positions(2 * seq.aligned_len);
        seq.joint = apply_rope(&seq.joint, rope, &positions)?;
        deinterleave(&seq)
    };
    let (qa, qv) = rotate(&audio.q, &visual.q)?;
    let (ka, kv) = rotate(&audio.k, &visual.k)?;
    let len = qa.dim(1);
    let va = audio.v.interp_nearest(len, 1)?;
    let vv = visual.v.interp_nearest(len, 1)?;

    let out = attention(
        &Tensor::concat(&[qa, qv], 1)?,
        &Tensor::concat(&[ka, kv], 1)?,
        &Tensor::concat(&[va, vv], 1)?,
    )?;
    let out_a = out.narrow(1, 0, len)?.interp_nearest(la, 1)?;
    let out_v = out.narrow(1, len, len)?.interp_nearest(lv, 1)?;
    Ok((out_a, out_v))
}

/// Queries from the audio-visual sequence attend to text keys/values. Text carries no positions.
pub fn cross_attention(q: &Tensor, text_k: &Tensor, text_v: &Tensor) -> Result<Tensor> {
    if text_k.rank() == 4 && text_k.dim(1) == 0 {
        return Err(Error::Empty("cross_attention with an empty text sequence"));
    }
    attention(q, text_k, text_v)
}

/// `[B, L, H*Dh] -> [B, L, H, Dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::shape("split_heads", s, &[heads]));
    }
    x.reshape(&[s[0], s[1], heads, s[2] / heads])
}

/// `[B, L, H, Dh] -> [B, L, H*Dh]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    check_rank4("merge_heads", x)?;
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])
}
