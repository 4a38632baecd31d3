//! Look-ahead stage: 1-D convolution along time over the encoder
//! embeddings, then L2 normalization. With right_pad future taps the
//! output for frame t becomes available right_pad frames later, which is
//! the system latency. right_pad = 0 (left-only kernel) is the causal
//! ablation.

use std::collections::VecDeque;

use crate::error::{ModelError, StreamError};
use crate::numerics::{tensor, ConvKind, Params, Tape, Tensor, Var};

use super::{ModelConfig, ParamVars};

/// Full-sequence look-ahead on a tape: conv over time, then unit-norm rows.
pub fn lookahead_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    e: Var,
) -> Result<Var, ModelError> {
    let conv = tape.conv1d_time(e, pv.var("la.conv.w"), pv.var("la.conv.b"), cfg.conv_spec())?;
    Ok(tape.l2_normalize_rows(conv))
}

/// Plain-tensor single-output convolution for streaming: output frame
/// `out_idx` from whatever window rows exist (missing frames are zero
/// padding). `get_row(i)` returns input frame i if it exists.
fn conv_one(
    params: &Params,
    cfg: &ModelConfig,
    out_idx: usize,
    get_row: impl Fn(isize) -> Option<Vec<f64>>,
) -> Tensor {
    let d = cfg.d_model;
    let k = cfg.kernel_size;
    let w = params.get("la.conv.w");
    let b = params.get("la.conv.b");
    let mut out = Tensor::zeros(1, d);
    for tap in 0..k {
        let src = out_idx as isize - cfg.left_pad as isize + tap as isize;
        let Some(row) = get_row(src) else { continue };
        match cfg.conv_kind {
            ConvKind::ChannelMix => {
                for ci in 0..d {
                    let xv = row[ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = w.row(tap * d + ci);
                    for co in 0..d {
                        out.data_mut()[co] += xv * wrow[co];
                    }
                }
            }
            ConvKind::Depthwise => {
                let wrow = w.row(tap);
                for c in 0..d {
                    out.data_mut()[c] += row[c] * wrow[c];
                }
            }
        }
    }
    for c in 0..d {
        out.data_mut()[c] += b.data()[c];
    }
    tensor::l2_normalize_rows(&out)
}

/// Streaming form of the look-ahead stage. Holds the pending kernel window;
/// emits nothing for the first right_pad pushes, then exactly one unit-norm
/// embedding per push (for the frame right_pad steps in the past). `flush`
/// drains the final right_pad frames using zero padding and closes the
/// buffer.
#[derive(Clone, Debug)]
pub struct LookaheadBuffer {
    /// Last <= kernel_size input rows; index of the oldest retained row.
    window: VecDeque<Vec<f64>>,
    oldest: usize,
    pushed: usize,
    emitted: usize,
    closed: bool,
}

impl LookaheadBuffer {
    pub fn new(cfg: &ModelConfig) -> Self {
        LookaheadBuffer {
            window: VecDeque::with_capacity(cfg.kernel_size),
            oldest: 0,
            pushed: 0,
            emitted: 0,
            closed: false,
        }
    }

    pub fn pending(&self) -> usize {
        self.pushed - self.emitted
    }

    pub fn cached_scalars(&self) -> usize {
        self.window.iter().map(|r| r.len()).sum()
    }

    fn emit(&mut self, params: &Params, cfg: &ModelConfig) -> Tensor {
        let out_idx = self.emitted;
        let out = conv_one(params, cfg, out_idx, |src| {
            if src < self.oldest as isize || src >= self.pushed as isize {
                return None;
            }
            Some(self.window[(src as usize) - self.oldest].clone())
        });
        self.emitted += 1;
        out
    }

    pub fn push(
        &mut self,
        e_t: &Tensor,
        params: &Params,
        cfg: &ModelConfig,
    ) -> Result<Option<Tensor>, StreamError> {
        if self.closed {
            return Err(StreamError::PushAfterClose);
        }
        if e_t.rows() != 1 || e_t.cols() != cfg.d_model {
            return Err(StreamError::Model(ModelError::FeatureDimMismatch {
                got: e_t.cols(),
                expected: cfg.d_model,
            }));
        }
        self.window.push_back(e_t.data().to_vec());
        self.pushed += 1;
        while self.window.len() > cfg.kernel_size {
            self.window.pop_front();
            self.oldest += 1;
        }
        if self.pushed > cfg.right_pad {
            Ok(Some(self.emit(params, cfg)))
        } else {
            Ok(None)
        }
    }

    pub fn flush(&mut self, params: &Params, cfg: &ModelConfig) -> Result<Vec<Tensor>, StreamError> {
        if self.closed {
            return Err(StreamError::DoubleFlush);
        }
        self.closed = true;
        let mut out = Vec::new();
        while self.emitted < self.pushed {
            out.push(self.emit(params, cfg));
        }
        Ok(out)
    }
}
