//! Frame-in, frame-out runtime. One feature frame goes in per `push`;
//! after the look-ahead delay of `right_pad` frames, one diarization frame
//! comes out per push. Output frame t matches the offline forward pass on
//! the full recording to within floating-point accumulation order.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{LabelError, StreamError};
use crate::labels::{self, ActivityLabels};
use crate::model::decoder::{decode_step, DecoderCache};
use crate::model::encoder::{encode_step, EncoderCache};
use crate::model::lookahead::LookaheadBuffer;
use crate::model::ModelConfig;
use crate::numerics::{Params, Tensor};

pub const ACTIVITY_THRESHOLD: f64 = 0.5;

/// One emitted diarization frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiarizationFrame {
    /// Output frame index (0-based).
    pub t: usize,
    /// Posteriors for all n_slots slots: slot 0 and the final slot are the
    /// non-speech and termination slots, slots 1..=s_max are speakers.
    pub posteriors: Vec<f64>,
    /// Thresholded speaker decisions, length s_max (slot 0 and the
    /// termination slot carry no speaker decision).
    pub active: Vec<bool>,
}

impl DiarizationFrame {
    pub fn speaker_posterior(&self, speaker: usize) -> f64 {
        self.posteriors[labels::speaker_slot(speaker)]
    }
}

/// Incremental per-recording state: the encoder and decoder key/value
/// caches plus the pending look-ahead window.
pub struct StreamState {
    cfg: ModelConfig,
    encoder: EncoderCache,
    lookahead: LookaheadBuffer,
    decoder: DecoderCache,
    frames_in: usize,
    frames_out: usize,
    speakers_seen: Vec<bool>,
    closed: bool,
}

impl StreamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        StreamState {
            cfg: cfg.clone(),
            encoder: EncoderCache::new(cfg),
            lookahead: LookaheadBuffer::new(cfg),
            decoder: DecoderCache::new(cfg),
            frames_in: 0,
            frames_out: 0,
            speakers_seen: vec![false; cfg.s_max],
            closed: false,
        }
    }

    pub fn frames_in(&self) -> usize {
        self.frames_in
    }

    pub fn frames_out(&self) -> usize {
        self.frames_out
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Frames pushed but not yet emitted; at most right_pad once the
    /// pipeline is primed.
    pub fn pending(&self) -> usize {
        self.frames_in - self.frames_out
    }

    /// Speakers whose activity has crossed the threshold at least once.
    pub fn speaker_count(&self) -> usize {
        self.speakers_seen.iter().filter(|s| **s).count()
    }

    /// Total scalars held across all caches, for memory introspection.
    pub fn cached_scalars(&self) -> usize {
        self.encoder.cached_scalars()
            + self.lookahead.cached_scalars()
            + self.decoder.cached_scalars()
    }

    fn emit(&mut self, e_t: &Tensor, params: &Params) -> Result<DiarizationFrame, StreamError> {
        let attractors = decode_step(e_t, &mut self.decoder, params, &self.cfg)?;
        let mut posteriors = Vec::with_capacity(self.cfg.n_slots());
        for s in 0..self.cfg.n_slots() {
            let dot: f64 = attractors
                .row(s)
                .iter()
                .zip(e_t.data())
                .map(|(a, e)| a * e)
                .sum();
            posteriors.push(1.0 / (1.0 + (-dot).exp()));
        }
        let active: Vec<bool> = (0..self.cfg.s_max)
            .map(|spk| posteriors[labels::speaker_slot(spk)] > ACTIVITY_THRESHOLD)
            .collect();
        for (seen, a) in self.speakers_seen.iter_mut().zip(&active) {
            *seen |= a;
        }
        let frame = DiarizationFrame { t: self.frames_out, posteriors, active };
        self.frames_out += 1;
        Ok(frame)
    }

    /// Feed feature frame `frames_in`. Emits the diarization frame for
    /// input index `frames_in - right_pad` once that much context exists.
    pub fn push(
        &mut self,
        x_t: &Tensor,
        params: &Params,
    ) -> Result<Option<DiarizationFrame>, StreamError> {
        if self.closed {
            return Err(StreamError::PushAfterClose);
        }
        let e_raw = encode_step(x_t, &mut self.encoder, params, &self.cfg)?;
        self.frames_in += 1;
        match self.lookahead.push(&e_raw, params, &self.cfg)? {
            Some(e_t) => Ok(Some(self.emit(&e_t, params)?)),
            None => Ok(None),
        }
    }

    /// End of stream: drain the final right_pad frames (their future taps
    /// are zero padding, exactly as in the offline convolution).
    pub fn flush(&mut self, params: &Params) -> Result<Vec<DiarizationFrame>, StreamError> {
        if self.closed {
            return Err(StreamError::DoubleFlush);
        }
        let tail = self.lookahead.flush(params, &self.cfg)?;
        self.closed = true;
        tail.iter().map(|e_t| self.emit(e_t, params)).collect()
    }
}

/// Run a whole recording through the stream and collect every frame.
pub fn stream_recording(
    params: &Params,
    cfg: &ModelConfig,
    features: &Tensor,
) -> Result<Vec<DiarizationFrame>, StreamError> {
    let mut state = StreamState::new(cfg);
    let mut out = Vec::with_capacity(features.rows());
    for t in 0..features.rows() {
        let frame = Tensor::new(vec![1, features.cols()], features.row(t).to_vec());
        if let Some(f) = state.push(&frame, params)? {
            out.push(f);
        }
    }
    out.extend(state.flush(params)?);
    Ok(out)
}

/// Thresholded speaker decisions as activity labels, e.g. for RTTM export.
pub fn frames_to_activity(
    frames: &[DiarizationFrame],
    s_max: usize,
    frame_period: f64,
) -> Result<ActivityLabels, LabelError> {
    let mut m = Tensor::zeros(frames.len(), s_max);
    for (t, f) in frames.iter().enumerate() {
        for (s, a) in f.active.iter().enumerate() {
            if *a {
                m.set(t, s, 1.0);
            }
        }
    }
    ActivityLabels::new(m, frame_period)
}

/// Wall-clock profile of a streamed recording.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    /// Audio seconds covered (frames * frame_period).
    pub audio_seconds: f64,
    /// Processing wall-clock seconds.
    pub wall_seconds: f64,
    /// wall_seconds / audio_seconds; < 1 means faster than real time.
    pub rtf: f64,
    pub p50_push_seconds: f64,
    pub p99_push_seconds: f64,
    pub max_push_seconds: f64,
    /// Per-push wall time sampled every `curve_stride` frames, to expose
    /// the per-frame cost growth of full-history attention.
    pub cost_curve: Vec<(usize, f64)>,
    pub final_cached_scalars: usize,
}

/// Stream `features` once, timing each push.
pub fn measure_rtf(
    params: &Params,
    cfg: &ModelConfig,
    features: &Tensor,
    curve_stride: usize,
) -> Result<BenchReport, StreamError> {
    let stride = curve_stride.max(1);
    let mut state = StreamState::new(cfg);
    let mut per_push = Vec::with_capacity(features.rows());
    let start = Instant::now();
    for t in 0..features.rows() {
        let frame = Tensor::new(vec![1, features.cols()], features.row(t).to_vec());
        let t0 = Instant::now();
        state.push(&frame, params)?;
        per_push.push(t0.elapsed().as_secs_f64());
    }
    state.flush(params)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    let cost_curve = per_push
        .iter()
        .enumerate()
        .filter(|(t, _)| t % stride == 0)
        .map(|(t, &d)| (t, d))
        .collect();
    let mut sorted = per_push.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| -> f64 {
        if sorted.is_empty() {
            return 0.0;
        }
        let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
        sorted[idx]
    };
    let audio_seconds = features.rows() as f64 * cfg.frame_period;
    Ok(BenchReport {
        frames: features.rows(),
        audio_seconds,
        wall_seconds,
        rtf: if audio_seconds > 0.0 { wall_seconds / audio_seconds } else { 0.0 },
        p50_push_seconds: pct(0.5),
        p99_push_seconds: pct(0.99),
        max_push_seconds: sorted.last().copied().unwrap_or(0.0),
        cost_curve,
        final_cached_scalars: state.cached_scalars(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{infer_offline, init_params};
    use crate::rng::sub_stream;
    use rand::Rng;

    fn random_features(seed: u64, t_len: usize, f: usize) -> Tensor {
        let mut rng = sub_stream(seed, "stream-test");
        Tensor::new(vec![t_len, f], (0..t_len * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn stream_matches_offline() {
        let cfg = ModelConfig::toy(5, 16, 4, 2, 2, 2);
        let params = init_params(&cfg, 21);
        let x = random_features(1, 25, 5);
        let offline = infer_offline(&params, &cfg, &x).unwrap();
        let streamed = stream_recording(&params, &cfg, &x).unwrap();
        assert_eq!(streamed.len(), 25);
        for (t, f) in streamed.iter().enumerate() {
            assert_eq!(f.t, t);
            for s in 0..cfg.n_slots() {
                assert!(
                    (f.posteriors[s] - offline.posteriors.at(t, s)).abs() <= 1e-9,
                    "frame {t} slot {s}: {} vs {}",
                    f.posteriors[s],
                    offline.posteriors.at(t, s)
                );
            }
        }
    }

    #[test]
    fn latency_contract() {
        // look-ahead kernel with right_pad 1: first emission on push 2
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        assert_eq!(cfg.right_pad, 1);
        let params = init_params(&cfg, 2);
        let x = random_features(3, 6, 4);
        let mut state = StreamState::new(&cfg);
        for t in 0..6 {
            let frame = Tensor::new(vec![1, 4], x.row(t).to_vec());
            let out = state.push(&frame, &params).unwrap();
            assert_eq!(out.is_some(), t >= cfg.right_pad, "push {t}");
            if let Some(f) = out {
                assert_eq!(f.t, t - cfg.right_pad);
            }
            assert!(state.pending() <= cfg.right_pad);
        }
        assert_eq!(state.flush(&params).unwrap().len(), cfg.right_pad);
        assert_eq!(state.frames_out(), 6);
    }

    #[test]
    fn causal_config_has_zero_latency() {
        let mut cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        cfg.kernel_size = 10;
        cfg.left_pad = 9;
        cfg.right_pad = 0;
        let params = init_params(&cfg, 7);
        let x = random_features(9, 8, 4);
        let mut state = StreamState::new(&cfg);
        for t in 0..8 {
            let frame = Tensor::new(vec![1, 4], x.row(t).to_vec());
            let f = state.push(&frame, &params).unwrap().expect("emit every push");
            assert_eq!(f.t, t);
        }
        assert!(state.flush(&params).unwrap().is_empty());
    }

    #[test]
    fn emitted_frames_ignore_future_input() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let params = init_params(&cfg, 5);
        let x = random_features(11, 12, 4);
        let full = stream_recording(&params, &cfg, &x).unwrap();

        let mut state = StreamState::new(&cfg);
        let mut early = Vec::new();
        for t in 0..6 {
            let frame = Tensor::new(vec![1, 4], x.row(t).to_vec());
            if let Some(f) = state.push(&frame, &params).unwrap() {
                early.push(f);
            }
        }
        // frames emitted before the divergent future must be bit-identical
        for (a, b) in early.iter().zip(&full) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let params = init_params(&cfg, 3);
        let x = random_features(13, 10, 4);
        let a = stream_recording(&params, &cfg, &x).unwrap();
        let b = stream_recording(&params, &cfg, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn speaker_count_tracks_thresholded_slots() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let params = init_params(&cfg, 17);
        let x = random_features(19, 15, 4);
        let mut state = StreamState::new(&cfg);
        let mut any_active = vec![false; cfg.s_max];
        for t in 0..15 {
            let frame = Tensor::new(vec![1, 4], x.row(t).to_vec());
            if let Some(f) = state.push(&frame, &params).unwrap() {
                for (s, a) in f.active.iter().enumerate() {
                    any_active[s] |= a;
                }
            }
        }
        for f in state.flush(&params).unwrap() {
            for (s, a) in f.active.iter().enumerate() {
                any_active[s] |= a;
            }
        }
        let expected = any_active.iter().filter(|a| **a).count();
        assert_eq!(state.speaker_count(), expected);
    }

    #[test]
    fn lifecycle_errors() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let params = init_params(&cfg, 1);
        let mut state = StreamState::new(&cfg);
        state.flush(&params).unwrap();
        let frame = Tensor::zeros(1, 4);
        assert!(matches!(state.push(&frame, &params), Err(StreamError::PushAfterClose)));
        assert!(matches!(state.flush(&params), Err(StreamError::DoubleFlush)));
    }

    #[test]
    fn bench_report_sane() {
        let cfg = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let params = init_params(&cfg, 23);
        let x = random_features(29, 40, 4);
        let report = measure_rtf(&params, &cfg, &x, 10).unwrap();
        assert_eq!(report.frames, 40);
        assert!((report.audio_seconds - 4.0).abs() < 1e-12);
        assert!(report.wall_seconds > 0.0);
        assert!(report.rtf > 0.0);
        assert!(report.p50_push_seconds <= report.p99_push_seconds);
        assert!(report.p99_push_seconds <= report.max_push_seconds);
        assert_eq!(report.cost_curve.len(), 4);
        assert!(report.final_cached_scalars > 0);
    }

    #[test]
    fn frames_to_activity_roundtrip() {
        let frames = vec![
            DiarizationFrame {
                t: 0,
                posteriors: vec![0.3, 0.7, 0.3, 0.3],
                active: vec![true, false],
            },
            DiarizationFrame {
                t: 1,
                posteriors: vec![0.3, 0.7, 0.7, 0.3],
                active: vec![true, true],
            },
        ];
        let acts = frames_to_activity(&frames, 2, 0.1).unwrap();
        assert_eq!(acts.matrix().at(0, 0), 1.0);
        assert_eq!(acts.matrix().at(0, 1), 0.0);
        assert_eq!(acts.matrix().at(1, 1), 1.0);
    }
}
