//! Training driver: deterministic loop over synthetic mixtures, periodic
//! checkpoints, JSON-line logging, and end-of-run scoring. The mixture
//! visited at step k depends only on the config, so resuming from a
//! checkpoint reproduces the uninterrupted trajectory exactly.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, TrainingMeta};
use crate::config::RunConfig;
use crate::datasim::generate;
use crate::error::{RunError, TrainError};
use crate::evalkit::{evaluate_corpus, MappingMode};
use crate::labels::{to_appearance_order, ActivityLabels, ExtendedLabelSequence};
use crate::model::{infer_offline, init_params, ModelConfig};
use crate::numerics::{Params, Tensor};
use crate::objective::{train_step, LossBreakdown, Optimizer, TrainOptions};
use crate::streaming;

pub struct Mixture {
    pub features: Tensor,
    pub labels: ActivityLabels,
    pub extended: ExtendedLabelSequence,
}

/// Materialize a deterministic split ("train", "heldout", ...).
pub fn build_split(cfg: &RunConfig, split: &str, count: usize) -> Result<Vec<Mixture>, RunError> {
    (0..count)
        .map(|i| {
            let (features, labels) = generate(&cfg.mixture_spec(split, i))?;
            let extended = to_appearance_order(&labels, cfg.model.s_max)?;
            Ok(Mixture { features, labels, extended })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub l_d: f64,
    pub l_e: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub final_loss: LossBreakdown,
    /// Pooled DER on the training mixtures (optimal mapping, no collar).
    pub train_der: f64,
    /// Pooled DER on freshly generated held-out mixtures.
    pub heldout_der: f64,
}

/// Threshold posteriors and score a mixture set (optimal mapping, collar 0).
pub fn corpus_der(
    params: &Params,
    model: &ModelConfig,
    mixtures: &[Mixture],
) -> Result<f64, RunError> {
    let mut pairs = Vec::with_capacity(mixtures.len());
    for m in mixtures {
        let out = infer_offline(params, model, &m.features)?;
        let frames: Vec<streaming::DiarizationFrame> = (0..out.posteriors.rows())
            .map(|t| {
                let posteriors = out.posteriors.row(t).to_vec();
                let active = (0..model.s_max)
                    .map(|s| {
                        posteriors[crate::labels::speaker_slot(s)] > streaming::ACTIVITY_THRESHOLD
                    })
                    .collect();
                streaming::DiarizationFrame { t, posteriors, active }
            })
            .collect();
        let hyp = streaming::frames_to_activity(&frames, model.s_max, model.frame_period)?;
        pairs.push((m.labels.clone(), hyp));
    }
    Ok(evaluate_corpus(&pairs, 0.0, MappingMode::Optimal)?.overall.der)
}

/// Run (or resume) a training loop. `log` receives one JSON line per step;
/// `checkpoint_path` receives periodic and final checkpoints. On a
/// non-finite loss the loop aborts with the last good checkpoint retained
/// on disk.
pub fn run_training(
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
    checkpoint_path: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainReport), RunError> {
    cfg.validate()?;
    let opts = TrainOptions {
        use_embedding_loss: cfg.train.use_embedding_loss,
        emb_label_mode: cfg.train.emb_label_mode,
    };
    let (mut params, mut optimizer, start_step) = match resume {
        Some(ckpt) => {
            if ckpt.config != cfg.model {
                return Err(RunError::Config(
                    "checkpoint model config does not match run config".into(),
                ));
            }
            let optimizer = ckpt.optimizer.ok_or_else(|| {
                RunError::Config("checkpoint has no optimizer state, cannot resume".into())
            })?;
            (ckpt.params, optimizer, ckpt.meta.step)
        }
        None => {
            let params = init_params(&cfg.model, cfg.seed);
            let optimizer =
                Optimizer::new(cfg.train.optimizer.kind(), cfg.train.lr, &params)
                    .map_err(TrainError::from)?;
            (params, optimizer, 0)
        }
    };

    let train_set = build_split(cfg, "train", cfg.data.n_mixtures)?;
    let mut last = LossBreakdown { l_d: 0.0, l_e: 0.0, total: f64::NAN };
    for step in start_step..cfg.train.steps {
        let mixture = &train_set[(step % cfg.data.n_mixtures as u64) as usize];
        last = train_step(
            &mut params,
            &mut optimizer,
            &cfg.model,
            &mixture.features,
            &mixture.extended,
            &opts,
        )?;
        if let Some(log) = log.as_deref_mut() {
            let line = LogLine {
                step: step + 1,
                l_d: last.l_d,
                l_e: last.l_e,
                total: last.total,
                lr: cfg.train.lr,
            };
            writeln!(log, "{}", serde_json::to_string(&line).expect("plain struct"))?;
        }
        let due = cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0;
        if due || step + 1 == cfg.train.steps {
            if let Some(path) = checkpoint_path {
                let ckpt = Checkpoint {
                    config: cfg.model.clone(),
                    params: params.clone(),
                    meta: TrainingMeta { step: step + 1, seed: cfg.seed, loss: last.total },
                    optimizer: Some(optimizer.clone()),
                };
                checkpoint::save(path, &ckpt)?;
            }
        }
    }

    let train_der = corpus_der(&params, &cfg.model, &train_set)?;
    let heldout = build_split(cfg, "heldout", cfg.data.n_heldout)?;
    let heldout_der = if heldout.is_empty() {
        f64::NAN
    } else {
        corpus_der(&params, &cfg.model, &heldout)?
    };
    let report = TrainReport {
        steps: cfg.train.steps,
        final_loss: last,
        train_der,
        heldout_der,
    };
    let ckpt = Checkpoint {
        config: cfg.model.clone(),
        params,
        meta: TrainingMeta { step: cfg.train.steps, seed: cfg.seed, loss: last.total },
        optimizer: Some(optimizer),
    };
    Ok((ckpt, report))
}
