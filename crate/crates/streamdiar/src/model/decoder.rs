//! Online non-autoregressive attractor decoder.
//!
//! Per frame the unit-norm speaker embedding is repeated across all
//! s_max + 2 attractor slots, distinguished by concatenating a sinusoidal
//! positional encoding of the slot index and mapping back to d_model with
//! a shared linear layer. Each of the M blocks runs masked frame
//! self-attention (MFSA, causal along time, per slot), cross-attractor
//! self-attention (CASA, across slots, per frame) and a feed-forward
//! sublayer, each with residual + post-norm. Outputs are L2-normalized to
//! give the attractors.

use crate::error::ModelError;
use crate::numerics::{tensor, Params, Tape, Tensor, Var};

use super::encoder::plain_mha_step;
use super::{
    add_norm, feed_forward, linear, multi_head_attention, plain_add_norm, plain_feed_forward,
    plain_linear, plain_mha_full, slot_positional_encoding, ModelConfig, ParamVars,
};

/// Tolerance for the unit-norm precondition on decoder inputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

fn check_unit_rows(x: &Tensor) -> Result<(), ModelError> {
    for r in 0..x.rows() {
        let norm: f64 = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ModelError::NotUnitNorm { row: r, norm, tol: UNIT_NORM_TOL });
        }
    }
    Ok(())
}

/// Decoder input for one frame: row s = Linear(concat(e_t, PE(s))).
/// All slots share the same repeated embedding; the PE row is what makes
/// them distinguishable.
pub fn decoder_input_frame(params: &Params, cfg: &ModelConfig, e_t: &Tensor) -> Tensor {
    let n_slots = cfg.n_slots();
    let d = cfg.d_model;
    let pe = slot_positional_encoding(n_slots, d);
    let mut cat = Tensor::zeros(n_slots, 2 * d);
    for s in 0..n_slots {
        for c in 0..d {
            cat.set(s, c, e_t.data()[c]);
            cat.set(s, d + c, pe.at(s, c));
        }
    }
    plain_linear(params, "dec.in", &cat)
}

/// Full-sequence decode on a tape. Input rows must be unit-norm; returns
/// one T x d_model attractor sequence per slot, rows unit-norm.
pub fn decode_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    e: Var,
) -> Result<Vec<Var>, ModelError> {
    check_unit_rows(tape.value(e))?;
    let t_len = tape.value(e).rows();
    let d = cfg.d_model;
    let n_slots = cfg.n_slots();
    let pe = slot_positional_encoding(n_slots, d);

    // per-slot input sequences: Linear(concat(e, PE(s) repeated over T))
    let mut slots: Vec<Var> = Vec::with_capacity(n_slots);
    for s in 0..n_slots {
        let pe_rows = Tensor::new(
            vec![t_len, d],
            (0..t_len).flat_map(|_| pe.row(s).to_vec()).collect(),
        );
        let pe_var = tape.constant(pe_rows);
        let cat = tape.concat_cols(e, pe_var)?;
        slots.push(linear(tape, pv, "dec.in", cat)?);
    }

    let time_mask = Tensor::lower_triangular(t_len);
    let slot_mask = Tensor::new(vec![n_slots, n_slots], vec![1.0; n_slots * n_slots]);
    for i in 0..cfg.m_dec_blocks {
        let prefix = format!("dec.{i}");
        let mut ln = 0;
        let order: [&str; 2] = if cfg.casa_before_mfsa { ["casa", "mfsa"] } else { ["mfsa", "casa"] };
        for sub in order {
            match sub {
                "mfsa" => {
                    // causal attention along time, per slot, shared weights
                    for slot in slots.iter_mut() {
                        let attn = multi_head_attention(
                            tape,
                            pv,
                            &format!("{prefix}.mfsa"),
                            *slot,
                            &time_mask,
                            cfg.n_heads,
                        )?;
                        *slot = add_norm(tape, pv, &format!("{prefix}.ln{ln}"), *slot, attn)?;
                    }
                }
                _ => {
                    // attention across slots, per frame
                    let mut frames: Vec<Var> = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let st = tape.gather_rows(&slots, t);
                        let attn = multi_head_attention(
                            tape,
                            pv,
                            &format!("{prefix}.casa"),
                            st,
                            &slot_mask,
                            cfg.n_heads,
                        )?;
                        frames.push(add_norm(tape, pv, &format!("{prefix}.ln{ln}"), st, attn)?);
                    }
                    for (s, slot) in slots.iter_mut().enumerate() {
                        *slot = tape.gather_rows(&frames, s);
                    }
                }
            }
            ln += 1;
        }
        for slot in slots.iter_mut() {
            let ff = feed_forward(tape, pv, &format!("{prefix}.ff"), *slot)?;
            *slot = add_norm(tape, pv, &format!("{prefix}.ln{ln}"), *slot, ff)?;
        }
    }
    Ok(slots.into_iter().map(|s| tape.l2_normalize_rows(s)).collect())
}

/// Per-stream decoder state: MFSA keys/values per block and slot. CASA and
/// the feed-forward are frame-local and need no cache.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    /// blocks[i][s] = (K rows, V rows) for slot s of block i.
    blocks: Vec<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    frames: usize,
    d_model: usize,
}

impl DecoderCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        DecoderCache {
            blocks: vec![vec![(Vec::new(), Vec::new()); cfg.n_slots()]; cfg.m_dec_blocks],
            frames: 0,
            d_model: cfg.d_model,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn cached_scalars(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|(k, v)| (k.len() + v.len()) * self.d_model)
            .sum()
    }
}

/// One incremental decode step: consumes the unit-norm embedding e_t and
/// returns the n_slots x d_model attractor matrix A_t, equal to the frame-t
/// slice of the batch decode on the prefix.
pub fn decode_step(
    e_t: &Tensor,
    cache: &mut DecoderCache,
    params: &Params,
    cfg: &ModelConfig,
) -> Result<Tensor, ModelError> {
    check_unit_rows(e_t)?;
    if cache.blocks.len() != cfg.m_dec_blocks
        || cache.blocks[0].len() != cfg.n_slots()
        || cache.d_model != cfg.d_model
    {
        return Err(ModelError::CacheMismatch {
            cache_frames: cache.frames,
            context: format!(
                "cache built for {} blocks / {} slots / d_model {}",
                cache.blocks.len(),
                cache.blocks.first().map_or(0, |b| b.len()),
                cache.d_model
            ),
        });
    }
    let n_slots = cfg.n_slots();
    let d = cfg.d_model;
    let mut state = decoder_input_frame(params, cfg, e_t);
    for (i, block_cache) in cache.blocks.iter_mut().enumerate() {
        let prefix = format!("dec.{i}");
        let mut ln = 0;
        let order: [&str; 2] = if cfg.casa_before_mfsa { ["casa", "mfsa"] } else { ["mfsa", "casa"] };
        for sub in order {
            match sub {
                "mfsa" => {
                    let mut attn = Tensor::zeros(n_slots, d);
                    for (s, (k_cache, v_cache)) in block_cache.iter_mut().enumerate() {
                        let row = Tensor::new(vec![1, d], state.row(s).to_vec());
                        let out = plain_mha_step(
                            params,
                            &format!("{prefix}.mfsa"),
                            &row,
                            k_cache,
                            v_cache,
                            cfg.n_heads,
                        );
                        for c in 0..d {
                            attn.set(s, c, out.at(0, c));
                        }
                    }
                    state = plain_add_norm(params, &format!("{prefix}.ln{ln}"), &state, &attn);
                }
                _ => {
                    let attn = plain_mha_full(params, &format!("{prefix}.casa"), &state, cfg.n_heads);
                    state = plain_add_norm(params, &format!("{prefix}.ln{ln}"), &state, &attn);
                }
            }
            ln += 1;
        }
        let ff = plain_feed_forward(params, &format!("{prefix}.ff"), &state);
        state = plain_add_norm(params, &format!("{prefix}.ln{ln}"), &state, &ff);
    }
    cache.frames += 1;
    Ok(tensor::l2_normalize_rows(&state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ParamVars};
    use crate::rng::sub_stream;
    use rand::Rng;

    fn unit_embeddings(seed: u64, t_len: usize, d: usize) -> Tensor {
        let mut rng = sub_stream(seed, "dec-test");
        let raw = Tensor::new(vec![t_len, d], (0..t_len * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        tensor::l2_normalize_rows(&raw)
    }

    fn batch_decode(params: &Params, cfg: &ModelConfig, e: &Tensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, params, false);
        let ev = tape.constant(e.clone());
        decode_tape(&mut tape, &pv, cfg, ev)
            .unwrap()
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect()
    }

    #[test]
    fn rejects_non_unit_input() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let params = init_params(&cfg, 1);
        let e = Tensor::new(vec![2, 8], vec![0.5; 16]);
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params, false);
        let ev = tape.constant(e);
        assert!(matches!(
            decode_tape(&mut tape, &pv, &cfg, ev),
            Err(ModelError::NotUnitNorm { .. })
        ));
    }

    #[test]
    fn output_rows_unit_norm() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 2, 2);
        let params = init_params(&cfg, 2);
        let e = unit_embeddings(3, 10, 8);
        for slot in batch_decode(&params, &cfg, &e) {
            for t in 0..10 {
                let norm: f64 = slot.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() <= 1e-12, "norm {norm}");
            }
        }
    }

    #[test]
    fn causality_along_time() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 2, 2);
        let params = init_params(&cfg, 5);
        let e = unit_embeddings(7, 9, 8);
        let base = batch_decode(&params, &cfg, &e);
        let mut e2 = e.clone();
        // replace frames 5.. with other unit rows
        let other = unit_embeddings(8, 9, 8);
        for t in 5..9 {
            for c in 0..8 {
                e2.set(t, c, other.at(t, c));
            }
        }
        let out2 = batch_decode(&params, &cfg, &e2);
        for s in 0..cfg.n_slots() {
            for t in 0..5 {
                assert_eq!(base[s].row(t), out2[s].row(t), "slot {s} frame {t}");
            }
        }
    }

    #[test]
    fn slots_pairwise_distinct() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 4);
        let params = init_params(&cfg, 9);
        let e = unit_embeddings(1, 6, 8);
        let out = batch_decode(&params, &cfg, &e);
        for t in 0..6 {
            for a in 0..cfg.n_slots() {
                for b in a + 1..cfg.n_slots() {
                    let dist: f64 = out[a]
                        .row(t)
                        .iter()
                        .zip(out[b].row(t))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist > 0.0, "slots {a},{b} identical at frame {t}");
                }
            }
        }
    }

    #[test]
    fn frame_local_when_mfsa_paths_zeroed() {
        // zero MFSA value/output projections: remaining CASA + FF are
        // frame-local, so attractors depend only on e_t
        let cfg = ModelConfig::toy(4, 8, 2, 1, 2, 2);
        let mut params = init_params(&cfg, 4);
        for i in 0..cfg.m_dec_blocks {
            for part in ["v.w", "v.b", "o.w", "o.b"] {
                let name = format!("dec.{i}.mfsa.{part}");
                let t = params.get(&name).map(|_| 0.0);
                *params.get_mut(&name) = t;
            }
        }
        let e = unit_embeddings(2, 5, 8);
        let base = batch_decode(&params, &cfg, &e);
        let mut e2 = e.clone();
        let other = unit_embeddings(6, 5, 8);
        for c in 0..8 {
            e2.set(3, c, other.at(3, c)); // perturb frame 3 only
        }
        let out2 = batch_decode(&params, &cfg, &e2);
        for s in 0..cfg.n_slots() {
            assert_eq!(base[s].row(4), out2[s].row(4), "slot {s}: frame 4 depends on frame 3");
        }
    }

    #[test]
    fn stepwise_equals_batch() {
        for casa_first in [false, true] {
            let mut cfg = ModelConfig::toy(4, 16, 4, 1, 2, 2);
            cfg.casa_before_mfsa = casa_first;
            let params = init_params(&cfg, 21);
            let e = unit_embeddings(13, 30, 16);
            let batch = batch_decode(&params, &cfg, &e);
            let mut cache = DecoderCache::new(&cfg);
            for t in 0..30 {
                let row = Tensor::new(vec![1, 16], e.row(t).to_vec());
                let a_t = decode_step(&row, &mut cache, &params, &cfg).unwrap();
                for s in 0..cfg.n_slots() {
                    for c in 0..16 {
                        assert!(
                            (a_t.at(s, c) - batch[s].at(t, c)).abs() <= 1e-9,
                            "casa_first {casa_first} slot {s} frame {t} col {c}"
                        );
                    }
                }
            }
            assert_eq!(cache.frames(), 30);
            // cache growth: K and V per slot per block, one row per frame
            assert_eq!(cache.cached_scalars(), 2 * 4 * (30 + 30) * 16);
        }
    }

    #[test]
    fn input_rows_differ_whenever_pe_rows_differ() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 4);
        let params = init_params(&cfg, 3);
        let e = unit_embeddings(4, 1, 8);
        let row = Tensor::new(vec![1, 8], e.row(0).to_vec());
        let inp = decoder_input_frame(&params, &cfg, &row);
        for a in 0..cfg.n_slots() {
            for b in a + 1..cfg.n_slots() {
                assert_ne!(inp.row(a), inp.row(b));
            }
        }
    }

    #[test]
    fn zero_input_linear_gives_bias_rows() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let mut params = init_params(&cfg, 3);
        *params.get_mut("dec.in.w") = Tensor::zeros(16, 8);
        let mut bias = Tensor::zeros(1, 8);
        for c in 0..8 {
            bias.set(0, c, c as f64 * 0.1);
        }
        *params.get_mut("dec.in.b") = bias.clone();
        let e = unit_embeddings(4, 1, 8);
        let row = Tensor::new(vec![1, 8], e.row(0).to_vec());
        let inp = decoder_input_frame(&params, &cfg, &row);
        for s in 0..cfg.n_slots() {
            assert_eq!(inp.row(s), bias.row(0));
        }
    }
}
