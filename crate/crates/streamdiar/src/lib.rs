//! Frame-wise streaming speaker diarization.
//!
//! A causal attention encoder extracts per-frame speaker embeddings, a
//! look-ahead time convolution trades a fixed latency for future context,
//! and a non-autoregressive attractor decoder emits one attractor per
//! speaker slot per frame. Activities are the sigmoid of attractor /
//! embedding inner products. The streaming runtime processes one frame at
//! a time and is numerically equivalent to the offline forward pass.

pub mod checkpoint;
pub mod config;
pub mod datasim;
pub mod error;
pub mod evalkit;
pub mod labels;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod streaming;
pub mod train;
