//! Causal speaker-embedding encoder: frame-wise linear input projection
//! followed by N masked transformer encoder blocks. Every self-attention
//! uses a lower-triangular mask, so output frame t is a function of input
//! frames 1..t only.
//!
//! No positional encoding is added at the input: the causal mask already
//! makes the blocks order-sensitive, and the architecture names only a
//! frame-wise linear layer before the first block. This is a judgment
//! call; see the module tests for the causality guarantees that hold
//! either way.

use crate::error::{ModelError, NumericsError};
use crate::numerics::{Params, Tape, Tensor, Var};

use super::{add_norm, feed_forward, linear, multi_head_attention, ModelConfig, ParamVars};

/// Full-sequence encoder forward on a tape: T x F -> T x d_model.
pub fn encode_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var, ModelError> {
    if tape.value(x).cols() != cfg.feat_dim {
        return Err(ModelError::FeatureDimMismatch {
            got: tape.value(x).cols(),
            expected: cfg.feat_dim,
        });
    }
    let t_len = tape.value(x).rows();
    let mask = Tensor::lower_triangular(t_len);
    let mut h = linear(tape, pv, "enc.in", x)?;
    for i in 0..cfg.n_enc_blocks {
        h = encoder_block(tape, pv, &format!("enc.{i}"), h, &mask, cfg.n_heads)?;
    }
    Ok(h)
}

fn encoder_block(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    mask: &Tensor,
    n_heads: usize,
) -> Result<Var, NumericsError> {
    let attn = multi_head_attention(tape, pv, &format!("{prefix}.attn"), x, mask, n_heads)?;
    let h = add_norm(tape, pv, &format!("{prefix}.ln0"), x, attn)?;
    let ff = feed_forward(tape, pv, &format!("{prefix}.ff"), h)?;
    add_norm(tape, pv, &format!("{prefix}.ln1"), h, ff)
}

/// Per-stream incremental state: keys and values of every past frame for
/// each block. Grows linearly with the frame count.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    /// Per block: (K, V), each t x d_model after t steps.
    blocks: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    frames: usize,
    d_model: usize,
}

impl EncoderCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        EncoderCache {
            blocks: vec![(Vec::new(), Vec::new()); cfg.n_enc_blocks],
            frames: 0,
            d_model: cfg.d_model,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Total cached scalars, for memory-growth introspection.
    pub fn cached_scalars(&self) -> usize {
        self.blocks.len() * self.frames * self.d_model * 2
    }
}

use super::{plain_add_norm, plain_feed_forward, plain_linear};

/// Attention of a single query row against cached keys/values, heads
/// processed independently. `k_rows`/`v_rows` hold one row per past frame
/// (current frame included).
pub(crate) fn attend_one(
    q: &Tensor,
    k_rows: &[Vec<f64>],
    v_rows: &[Vec<f64>],
    n_heads: usize,
) -> Tensor {
    let d = q.cols();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let t = k_rows.len();
    let mut out = Tensor::zeros(1, d);
    for h in 0..n_heads {
        let off = h * head_dim;
        let qh = &q.data()[off..off + head_dim];
        // scores over the prefix, stabilized exactly like masked_softmax
        let mut scores = Vec::with_capacity(t);
        let mut max = f64::NEG_INFINITY;
        for krow in k_rows {
            let s: f64 = qh.iter().zip(&krow[off..off + head_dim]).map(|(a, b)| a * b).sum::<f64>() * scale;
            if s > max {
                max = s;
            }
            scores.push(s);
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (w, vrow) in scores.iter().zip(v_rows) {
            let w = w / sum;
            for i in 0..head_dim {
                out.data_mut()[off + i] += w * vrow[off + i];
            }
        }
    }
    out
}

pub(crate) fn plain_mha_step(
    params: &Params,
    prefix: &str,
    x: &Tensor,
    k_cache: &mut Vec<Vec<f64>>,
    v_cache: &mut Vec<Vec<f64>>,
    n_heads: usize,
) -> Tensor {
    let q = plain_linear(params, &format!("{prefix}.q"), x);
    let k = plain_linear(params, &format!("{prefix}.k"), x);
    let v = plain_linear(params, &format!("{prefix}.v"), x);
    k_cache.push(k.data().to_vec());
    v_cache.push(v.data().to_vec());
    let ctx = attend_one(&q, k_cache, v_cache, n_heads);
    plain_linear(params, &format!("{prefix}.o"), &ctx)
}

/// One incremental encoder step: consumes feature frame t, returns the
/// embedding e_t. Equals column t of the batch forward on the prefix.
pub fn encode_step(
    x_t: &Tensor,
    cache: &mut EncoderCache,
    params: &Params,
    cfg: &ModelConfig,
) -> Result<Tensor, ModelError> {
    if x_t.rows() != 1 || x_t.cols() != cfg.feat_dim {
        return Err(ModelError::FeatureDimMismatch { got: x_t.cols(), expected: cfg.feat_dim });
    }
    if cache.blocks.len() != cfg.n_enc_blocks || cache.d_model != cfg.d_model {
        return Err(ModelError::CacheMismatch {
            cache_frames: cache.frames,
            context: format!(
                "cache built for {} blocks / d_model {}, config has {} / {}",
                cache.blocks.len(),
                cache.d_model,
                cfg.n_enc_blocks,
                cfg.d_model
            ),
        });
    }
    let mut h = plain_linear(params, "enc.in", x_t);
    for (i, (k_cache, v_cache)) in cache.blocks.iter_mut().enumerate() {
        let prefix = format!("enc.{i}");
        let attn = plain_mha_step(params, &format!("{prefix}.attn"), &h, k_cache, v_cache, cfg.n_heads);
        let h1 = plain_add_norm(params, &format!("{prefix}.ln0"), &h, &attn);
        let ff = plain_feed_forward(params, &format!("{prefix}.ff"), &h1);
        h = plain_add_norm(params, &format!("{prefix}.ln1"), &h1, &ff);
    }
    cache.frames += 1;
    Ok(h)
}
