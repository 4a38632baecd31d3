//! Run configuration: one TOML file (or the built-in toy defaults) covers
//! the model, the optimizer, and the synthetic dataset. Unknown keys are
//! rejected so a typo cannot silently fall back to a default.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasim::MixtureSpec;
use crate::error::RunError;
use crate::model::ModelConfig;
use crate::objective::{EmbLabelMode, OptimizerKind};
use crate::rng::sub_stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::adam_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    /// Checkpoint every this many steps; 0 disables periodic checkpoints
    /// (the final one is always written).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_true")]
    pub use_embedding_loss: bool,
    #[serde(default = "default_emb_mode")]
    pub emb_label_mode: EmbLabelMode,
}

fn default_true() -> bool {
    true
}

fn default_emb_mode() -> EmbLabelMode {
    EmbLabelMode::Extended
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_mixtures: usize,
    pub n_speakers: usize,
    pub duration_frames: usize,
    pub overlap_ratio: f64,
    pub mean_turn_frames: f64,
    pub cluster_spread: f64,
    /// Mixtures held out for the end-of-run evaluation.
    #[serde(default = "default_heldout")]
    pub n_heldout: usize,
}

fn default_heldout() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, RunError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.model.validate().map_err(|e| RunError::Config(e.to_string()))?;
        if self.train.steps == 0 {
            return Err(RunError::Config("train.steps must be positive".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(RunError::Config(format!(
                "train.lr must be positive, got {}",
                self.train.lr
            )));
        }
        if self.data.n_mixtures == 0 {
            return Err(RunError::Config("data.n_mixtures must be positive".into()));
        }
        if self.data.n_speakers > self.model.s_max {
            return Err(RunError::Config(format!(
                "data.n_speakers {} exceeds model s_max {}",
                self.data.n_speakers, self.model.s_max
            )));
        }
        // one dry validation of the mixture parameters
        self.mixture_spec("validate", 0).validate().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    /// Spec for the i-th mixture of a named split; the mixture seed is
    /// drawn from a sub-stream of the global seed so splits never collide.
    pub fn mixture_spec(&self, split: &str, index: usize) -> MixtureSpec {
        let seed = sub_stream(self.seed, &format!("{split}-mixture-{index}")).gen();
        MixtureSpec {
            n_speakers: self.data.n_speakers,
            duration_frames: self.data.duration_frames,
            overlap_ratio: self.data.overlap_ratio,
            mean_turn_frames: self.data.mean_turn_frames,
            seed,
            feat_dim: self.model.feat_dim,
            cluster_spread: self.data.cluster_spread,
            frame_period: self.model.frame_period,
        }
    }

    /// Small defaults that train in minutes on one core.
    pub fn toy(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            model: ModelConfig::toy(16, 16, 4, 2, 1, 2),
            train: TrainSection {
                steps: 2000,
                lr: 1e-3,
                optimizer: OptimizerChoice::Adam,
                checkpoint_every: 0,
                use_embedding_loss: true,
                emb_label_mode: EmbLabelMode::Extended,
            },
            data: DataSection {
                n_mixtures: 20,
                n_speakers: 2,
                duration_frames: 200,
                overlap_ratio: 0.2,
                mean_turn_frames: 20.0,
                cluster_spread: 0.1,
                n_heldout: 5,
            },
        }
    }
}
