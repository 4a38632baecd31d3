//! The trainable model: causal embedding encoder, look-ahead convolution,
//! and the online attractor decoder, plus parameter initialization and the
//! offline (full-sequence) forward pass.

pub mod decoder;
pub mod encoder;
pub mod lookahead;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, NumericsError};
use crate::numerics::{tensor, ConvKind, ConvSpec, Params, Tape, Tensor, Var};
use crate::rng::sub_stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature dimension F.
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Encoder blocks N.
    pub n_enc_blocks: usize,
    /// Decoder blocks M.
    pub m_dec_blocks: usize,
    /// Maximum speaker count; the decoder runs s_max + 2 slots.
    pub s_max: usize,
    pub kernel_size: usize,
    pub left_pad: usize,
    pub right_pad: usize,
    pub conv_kind: ConvKind,
    /// Seconds per frame.
    pub frame_period: f64,
    /// Ablation switch: run CASA before MFSA inside each decoder block.
    pub casa_before_mfsa: bool,
}

impl ModelConfig {
    /// Reference-scale configuration: N=4, M=2, 256 hidden units, 4 heads,
    /// 345-dim features, kernel 19 with 9 frames of look-ahead at 0.1 s
    /// per frame (~1 s latency).
    pub fn reference() -> Self {
        ModelConfig {
            feat_dim: 345,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            n_enc_blocks: 4,
            m_dec_blocks: 2,
            s_max: 4,
            kernel_size: 19,
            left_pad: 9,
            right_pad: 9,
            conv_kind: ConvKind::ChannelMix,
            frame_period: 0.1,
            casa_before_mfsa: false,
        }
    }

    /// Small configuration for tests and desk-scale training.
    pub fn toy(feat_dim: usize, d_model: usize, n_heads: usize, n_enc: usize, m_dec: usize, s_max: usize) -> Self {
        ModelConfig {
            feat_dim,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            n_enc_blocks: n_enc,
            m_dec_blocks: m_dec,
            s_max,
            kernel_size: 3,
            left_pad: 1,
            right_pad: 1,
            conv_kind: ConvKind::ChannelMix,
            frame_period: 0.1,
            casa_before_mfsa: false,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.s_max + 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            kernel_size: self.kernel_size,
            left_pad: self.left_pad,
            right_pad: self.right_pad,
            kind: self.conv_kind,
        }
    }

    /// Look-ahead latency in seconds.
    pub fn latency_seconds(&self) -> f64 {
        self.right_pad as f64 * self.frame_period
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.left_pad + self.right_pad != self.kernel_size.saturating_sub(1) || self.kernel_size < 1 {
            return Err(format!(
                "inconsistent latency settings: left_pad {} + right_pad {} != kernel_size {} - 1",
                self.left_pad, self.right_pad, self.kernel_size
            ));
        }
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_blocks", self.n_enc_blocks),
            ("m_dec_blocks", self.m_dec_blocks),
            ("s_max", self.s_max),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.frame_period <= 0.0 {
            return Err("frame_period must be positive".to_string());
        }
        Ok(())
    }
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
}

fn init_linear(p: &mut Params, rng: &mut impl Rng, prefix: &str, d_in: usize, d_out: usize) {
    p.insert(format!("{prefix}.w"), xavier(rng, d_in, d_out));
    p.insert(format!("{prefix}.b"), Tensor::zeros(1, d_out));
}

fn init_layer_norm(p: &mut Params, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.g"), Tensor::new(vec![1, d], vec![1.0; d]));
    p.insert(format!("{prefix}.b"), Tensor::zeros(1, d));
}

fn init_attention(p: &mut Params, rng: &mut impl Rng, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(p, rng, &format!("{prefix}.{proj}"), d, d);
    }
}

fn init_block(p: &mut Params, rng: &mut impl Rng, prefix: &str, attn_names: &[&str], d: usize, d_ff: usize) {
    for name in attn_names {
        init_attention(p, rng, &format!("{prefix}.{name}"), d);
    }
    init_linear(p, rng, &format!("{prefix}.ff.1"), d, d_ff);
    init_linear(p, rng, &format!("{prefix}.ff.2"), d_ff, d);
    for i in 0..attn_names.len() + 1 {
        init_layer_norm(p, &format!("{prefix}.ln{i}"), d);
    }
}

/// Seeded parameter initialization (Xavier-uniform weights, zero biases,
/// unit layer-norm gains).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Params {
    let mut rng = sub_stream(seed, "model-init");
    let mut p = Params::new();
    let d = cfg.d_model;
    init_linear(&mut p, &mut rng, "enc.in", cfg.feat_dim, d);
    for i in 0..cfg.n_enc_blocks {
        init_block(&mut p, &mut rng, &format!("enc.{i}"), &["attn"], d, cfg.d_ff);
    }
    match cfg.conv_kind {
        ConvKind::ChannelMix => {
            p.insert("la.conv.w", xavier(&mut rng, cfg.kernel_size * d, d));
        }
        ConvKind::Depthwise => {
            p.insert("la.conv.w", xavier(&mut rng, cfg.kernel_size, d));
        }
    }
    p.insert("la.conv.b", Tensor::zeros(1, d));
    init_linear(&mut p, &mut rng, "dec.in", 2 * d, d);
    for i in 0..cfg.m_dec_blocks {
        init_block(&mut p, &mut rng, &format!("dec.{i}"), &["mfsa", "casa"], d, cfg.d_ff);
    }
    p
}

/// Sinusoidal positional encoding over attractor slot indices, n_slots x d.
pub fn slot_positional_encoding(n_slots: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(n_slots, d);
    for s in 0..n_slots {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = s as f64 * rate;
            pe.set(s, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Model parameters bound onto a tape, addressable by name.
pub struct ParamVars {
    map: IndexMap<String, Var>,
}

impl ParamVars {
    /// Binds every parameter as a tape leaf; `trainable` controls whether
    /// gradients flow (inference reuses the same forward with constants).
    pub fn bind(tape: &mut Tape, params: &Params, trainable: bool) -> Self {
        let mut map = IndexMap::new();
        for (name, t) in params.iter() {
            let var = if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            map.insert(name.clone(), var);
        }
        ParamVars { map }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    /// Analytic gradients for every bound parameter after `tape.backward()`.
    pub fn grads(&self, tape: &Tape) -> Params {
        let mut out = Params::new();
        for (name, var) in &self.map {
            out.insert(name.clone(), tape.grad(*var));
        }
        out
    }
}

/// x W + b on the tape.
pub fn linear(tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let h = tape.matmul(x, pv.var(&format!("{prefix}.w")))?;
    tape.add_row(h, pv.var(&format!("{prefix}.b")))
}

/// Multi-head scaled dot-product self-attention with a binary mask,
/// followed by the output projection. Standard transformer layout; scores
/// are divided by sqrt(head_dim).
pub fn multi_head_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    mask: &Tensor,
    n_heads: usize,
) -> Result<Var, NumericsError> {
    let d = tape.value(x).cols();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = linear(tape, pv, &format!("{prefix}.q"), x)?;
    let k = linear(tape, pv, &format!("{prefix}.k"), x)?;
    let v = linear(tape, pv, &format!("{prefix}.v"), x)?;
    let mut merged: Option<Var> = None;
    for h in 0..n_heads {
        let qh = tape.col_slice(q, h * head_dim, head_dim);
        let kh = tape.col_slice(k, h * head_dim, head_dim);
        let vh = tape.col_slice(v, h * head_dim, head_dim);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scaled, mask.clone())?;
        let ctx = tape.matmul(probs, vh)?;
        merged = Some(match merged {
            None => ctx,
            Some(m) => tape.concat_cols(m, ctx)?,
        });
    }
    linear(tape, pv, &format!("{prefix}.o"), merged.expect("n_heads >= 1"))
}

/// Residual add + post-norm layer normalization.
pub fn add_norm(
    tape: &mut Tape,
    pv: &ParamVars,
    ln_prefix: &str,
    x: Var,
    sub: Var,
) -> Result<Var, NumericsError> {
    let sum = tape.add(x, sub)?;
    tape.layer_norm(
        sum,
        pv.var(&format!("{ln_prefix}.g")),
        pv.var(&format!("{ln_prefix}.b")),
        crate::model::LN_EPS,
    )
}

/// Two-layer feed-forward with ReLU.
pub fn feed_forward(tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let h = linear(tape, pv, &format!("{prefix}.1"), x)?;
    let a = tape.relu(h);
    linear(tape, pv, &format!("{prefix}.2"), a)
}

pub const LN_EPS: f64 = 1e-5;

// Plain-tensor (inference-path) counterparts of the tape building blocks,
// shared by the incremental encoder and decoder steps.

pub(crate) fn plain_linear(params: &Params, prefix: &str, x: &Tensor) -> Tensor {
    let h = tensor::matmul(x, params.get(&format!("{prefix}.w"))).expect("projection shape");
    tensor::add_row(&h, params.get(&format!("{prefix}.b"))).expect("bias shape")
}

pub(crate) fn plain_add_norm(params: &Params, ln_prefix: &str, x: &Tensor, sub: &Tensor) -> Tensor {
    let sum = tensor::add(x, sub).expect("residual shape");
    tensor::layer_norm(
        &sum,
        params.get(&format!("{ln_prefix}.g")),
        params.get(&format!("{ln_prefix}.b")),
        LN_EPS,
    )
    .expect("layer norm shape")
}

pub(crate) fn plain_feed_forward(params: &Params, prefix: &str, x: &Tensor) -> Tensor {
    let h = plain_linear(params, &format!("{prefix}.1"), x);
    let a = tensor::relu(&h);
    plain_linear(params, &format!("{prefix}.2"), &a)
}

/// Full (unmasked) multi-head self-attention on plain tensors; the CASA
/// sublayer within one frame.
pub(crate) fn plain_mha_full(params: &Params, prefix: &str, x: &Tensor, n_heads: usize) -> Tensor {
    let d = x.cols();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = plain_linear(params, &format!("{prefix}.q"), x);
    let k = plain_linear(params, &format!("{prefix}.k"), x);
    let v = plain_linear(params, &format!("{prefix}.v"), x);
    let ones = Tensor::new(vec![x.rows(), x.rows()], vec![1.0; x.rows() * x.rows()]);
    let mut merged: Option<Tensor> = None;
    for h in 0..n_heads {
        let qh = tensor::col_slice(&q, h * head_dim, head_dim);
        let kh = tensor::col_slice(&k, h * head_dim, head_dim);
        let vh = tensor::col_slice(&v, h * head_dim, head_dim);
        let scores = tensor::scale(&tensor::matmul(&qh, &tensor::transpose(&kh)).unwrap(), scale);
        let probs = tensor::masked_softmax(&scores, &ones).unwrap();
        let ctx = tensor::matmul(&probs, &vh).unwrap();
        merged = Some(match merged {
            None => ctx,
            Some(m) => tensor::concat_cols(&m, &ctx).unwrap(),
        });
    }
    plain_linear(params, &format!("{prefix}.o"), &merged.expect("n_heads >= 1"))
}

/// Everything the offline forward pass produces.
pub struct ForwardOut {
    /// Post-lookahead unit-norm embeddings, T x d_model.
    pub embeddings: Var,
    /// Per-slot attractor sequences, each T x d_model, unit-norm rows.
    pub attractors: Vec<Var>,
    /// T x n_slots activity posteriors.
    pub posteriors: Var,
}

/// Full offline pipeline on a tape: encode -> look-ahead -> decode ->
/// activity head.
pub fn forward_full(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
) -> Result<ForwardOut, ModelError> {
    let enc = encoder::encode_tape(tape, pv, cfg, x)?;
    let emb = lookahead::lookahead_tape(tape, pv, cfg, enc)?;
    let attractors = decoder::decode_tape(tape, pv, cfg, emb)?;
    let posteriors = activity_tape(tape, &attractors, emb)?;
    Ok(ForwardOut { embeddings: emb, attractors, posteriors })
}

/// sigmoid(A_t^T e_t) for every frame: per slot a row-wise inner product
/// with the embeddings, columns concatenated in slot order.
pub fn activity_tape(tape: &mut Tape, attractors: &[Var], emb: Var) -> Result<Var, ModelError> {
    let mut logits: Option<Var> = None;
    for &a in attractors {
        let dot = tape.rowwise_dot(a, emb)?;
        logits = Some(match logits {
            None => dot,
            Some(l) => tape.concat_cols(l, dot)?,
        });
    }
    Ok(tape.sigmoid(logits.expect("at least one slot")))
}

/// Offline inference on plain tensors (no gradients).
pub fn infer_offline(params: &Params, cfg: &ModelConfig, x: &Tensor) -> Result<OfflineOut, ModelError> {
    if x.cols() != cfg.feat_dim {
        return Err(ModelError::FeatureDimMismatch { got: x.cols(), expected: cfg.feat_dim });
    }
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let out = forward_full(&mut tape, &pv, cfg, xv)?;
    Ok(OfflineOut {
        embeddings: tape.value(out.embeddings).clone(),
        attractors: out.attractors.iter().map(|a| tape.value(*a).clone()).collect(),
        posteriors: tape.value(out.posteriors).clone(),
    })
}

pub struct OfflineOut {
    pub embeddings: Tensor,
    pub attractors: Vec<Tensor>,
    pub posteriors: Tensor,
}
