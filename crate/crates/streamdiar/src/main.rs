//! Command-line front end tying simulation, training, inference, scoring,
//! and benchmarking into reproducible workflows.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use streamdiar::checkpoint;
use streamdiar::config::RunConfig;
use streamdiar::datasim::{self, MixtureSpec};
use streamdiar::error::RunError;
use streamdiar::evalkit::{self, MappingMode};
use streamdiar::labels;
use streamdiar::model::infer_offline;
use streamdiar::streaming::{self, StreamState};
use streamdiar::train::run_training;

#[derive(Parser)]
#[command(
    name = "streamdiar",
    about = "Streaming neural speaker diarization: train, run, and score desk-scale models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InferMode {
    Offline,
    Stream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MappingArg {
    Optimal,
    Appearance,
}

impl From<MappingArg> for MappingMode {
    fn from(m: MappingArg) -> MappingMode {
        match m {
            MappingArg::Optimal => MappingMode::Optimal,
            MappingArg::Appearance => MappingMode::Appearance,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path (also the resume source with --resume).
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines training log; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the checkpoint at --checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run a checkpoint over a feature file and emit RTTM plus JSON frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value_t = InferMode::Offline)]
        mode: InferMode,
        #[arg(long, default_value = "rec")]
        rec_id: String,
        /// RTTM output path; stdout when omitted.
        #[arg(long)]
        rttm: Option<PathBuf>,
        /// Per-frame JSON-lines output path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Frame-by-frame inference with latency bookkeeping (infer --mode stream).
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "rec")]
        rec_id: String,
        #[arg(long)]
        rttm: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score a hypothesis RTTM against a reference RTTM.
    Score {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        hypothesis: PathBuf,
        /// Collar in seconds around reference boundaries.
        #[arg(long, default_value_t = 0.25)]
        collar: f64,
        #[arg(long, value_enum, default_value_t = MappingArg::Optimal)]
        mapping: MappingArg,
        /// Frame period used to rasterize the RTTM segments.
        #[arg(long, default_value_t = 0.1)]
        frame_period: f64,
    },
    /// Measure streaming throughput and per-frame latency of a checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Synthetic input length in frames.
        #[arg(long, default_value_t = 600)]
        frames: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Sample the per-frame cost curve every this many frames.
        #[arg(long, default_value_t = 50)]
        curve_stride: usize,
    },
    /// Generate a synthetic mixture: a feature file plus reference labels.
    Simulate {
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 0.2)]
        overlap: f64,
        #[arg(long, default_value_t = 20.0)]
        mean_turn_frames: f64,
        #[arg(long, default_value_t = 16)]
        feat_dim: usize,
        #[arg(long, default_value_t = 0.1)]
        cluster_spread: f64,
        #[arg(long, default_value_t = 0.1)]
        frame_period: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Feature output path (.bin or .csv).
        #[arg(long)]
        features: PathBuf,
        /// Reference RTTM output path.
        #[arg(long)]
        rttm: Option<PathBuf>,
        #[arg(long, default_value = "sim")]
        rec_id: String,
    },
    /// Write the frame embeddings of a recording to CSV.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn write_or_stdout(path: Option<&PathBuf>, content: &str) -> Result<(), RunError> {
    match path {
        Some(p) => std::fs::write(p, content)?,
        None => print!("{content}"),
    }
    Ok(())
}

fn load_model(
    path: &PathBuf,
    feature_dim: usize,
) -> Result<checkpoint::Checkpoint, RunError> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.config.feat_dim != feature_dim {
        return Err(RunError::Config(format!(
            "feature file has dim {feature_dim} but checkpoint expects {}",
            ckpt.config.feat_dim
        )));
    }
    Ok(ckpt)
}

fn infer(
    checkpoint: &PathBuf,
    features: &PathBuf,
    mode: InferMode,
    rec_id: &str,
    rttm: Option<&PathBuf>,
    json: Option<&PathBuf>,
) -> Result<(), RunError> {
    let (feats, frame_period) = datasim::read_features(features)?;
    if feats.rows() == 0 {
        write_or_stdout(rttm, "")?;
        return Ok(());
    }
    let ckpt = load_model(checkpoint, feats.cols())?;
    let cfg = &ckpt.config;
    if (cfg.frame_period - frame_period).abs() > 1e-9 {
        eprintln!(
            "warning: feature frame period {frame_period} differs from model {}",
            cfg.frame_period
        );
    }

    let frames = match mode {
        InferMode::Offline => {
            let out = infer_offline(&ckpt.params, cfg, &feats)?;
            (0..out.posteriors.rows())
                .map(|t| {
                    let posteriors = out.posteriors.row(t).to_vec();
                    let active = (0..cfg.s_max)
                        .map(|s| {
                            posteriors[labels::speaker_slot(s)] > streaming::ACTIVITY_THRESHOLD
                        })
                        .collect();
                    streaming::DiarizationFrame { t, posteriors, active }
                })
                .collect()
        }
        InferMode::Stream => {
            let mut state = StreamState::new(cfg);
            let mut out = Vec::with_capacity(feats.rows());
            for t in 0..feats.rows() {
                let row = streamdiar::numerics::Tensor::new(
                    vec![1, feats.cols()],
                    feats.row(t).to_vec(),
                );
                if let Some(f) = state.push(&row, &ckpt.params)? {
                    out.push(f);
                }
            }
            out.extend(state.flush(&ckpt.params)?);
            eprintln!(
                "streamed {} frames with {}-frame look-ahead latency ({:.2} s); \
                 estimated speakers: {}",
                state.frames_out(),
                cfg.right_pad,
                cfg.latency_seconds(),
                state.speaker_count()
            );
            out
        }
    };

    if let Some(json_path) = json {
        let mut file = std::fs::File::create(json_path)?;
        for f in &frames {
            writeln!(file, "{}", serde_json::to_string(f).expect("plain struct"))?;
        }
    }
    let hyp = streaming::frames_to_activity(&frames, cfg.s_max, cfg.frame_period)?;
    write_or_stdout(rttm, &labels::to_rttm(&hyp, rec_id, None))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train { config, checkpoint: ckpt_path, log, resume } => {
            let cfg = RunConfig::load(&config)?;
            let resume_from = if resume {
                Some(checkpoint::load(&ckpt_path)?)
            } else {
                None
            };
            let stdout = std::io::stdout();
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(std::fs::File::create(p)?),
                None => Box::new(stdout.lock()),
            };
            let (ckpt, report) =
                run_training(&cfg, resume_from, Some(&ckpt_path), Some(&mut sink))?;
            drop(sink);
            checkpoint::save(&ckpt_path, &ckpt)?;
            eprintln!("{}", serde_json::to_string_pretty(&report).expect("plain struct"));
            Ok(())
        }
        Command::Infer { checkpoint, features, mode, rec_id, rttm, json } => {
            infer(&checkpoint, &features, mode, &rec_id, rttm.as_ref(), json.as_ref())
        }
        Command::Stream { checkpoint, features, rec_id, rttm, json } => infer(
            &checkpoint,
            &features,
            InferMode::Stream,
            &rec_id,
            rttm.as_ref(),
            json.as_ref(),
        ),
        Command::Score { reference, hypothesis, collar, mapping, frame_period } => {
            let ref_text = std::fs::read_to_string(&reference)?;
            let hyp_text = std::fs::read_to_string(&hypothesis)?;
            let refs = labels::from_rttm(&ref_text, frame_period, None)?;
            let frames = refs.num_frames();
            let hyp = labels::from_rttm(&hyp_text, frame_period, Some(frames))?;
            let report = evalkit::der(&refs, &hyp, collar, mapping.into())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("plain struct"));
            Ok(())
        }
        Command::Bench { checkpoint, frames, seed, curve_stride } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            let spec = MixtureSpec {
                n_speakers: ckpt.config.s_max.min(datasim::MAX_SPEAKERS),
                duration_frames: frames,
                overlap_ratio: 0.2,
                mean_turn_frames: 20.0,
                seed,
                feat_dim: ckpt.config.feat_dim,
                cluster_spread: 0.1,
                frame_period: ckpt.config.frame_period,
            };
            let (feats, _) = datasim::generate(&spec)?;
            let report = streaming::measure_rtf(&ckpt.params, &ckpt.config, &feats, curve_stride)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("plain struct"));
            eprintln!(
                "frames: {}  audio: {:.1} s  wall: {:.3} s  rtf: {:.4} ({})",
                report.frames,
                report.audio_seconds,
                report.wall_seconds,
                report.rtf,
                if report.rtf <= 1.0 { "real-time" } else { "not real-time" }
            );
            eprintln!(
                "per-push seconds: p50 {:.6}  p99 {:.6}  max {:.6}",
                report.p50_push_seconds, report.p99_push_seconds, report.max_push_seconds
            );
            eprintln!("cached scalars at end of stream: {}", report.final_cached_scalars);
            Ok(())
        }
        Command::Simulate {
            speakers,
            frames,
            overlap,
            mean_turn_frames,
            feat_dim,
            cluster_spread,
            frame_period,
            seed,
            features,
            rttm,
            rec_id,
        } => {
            let spec = MixtureSpec {
                n_speakers: speakers,
                duration_frames: frames,
                overlap_ratio: overlap,
                mean_turn_frames,
                seed,
                feat_dim,
                cluster_spread,
                frame_period,
            };
            let (feats, labels_out) = datasim::generate(&spec)?;
            datasim::write_features(&features, &feats, frame_period)?;
            write_or_stdout(rttm.as_ref(), &labels::to_rttm(&labels_out, &rec_id, None))?;
            eprintln!(
                "wrote {} frames x {} dims; measured overlap {:.3}",
                frames,
                feat_dim,
                datasim::measured_overlap(&labels_out)
            );
            Ok(())
        }
        Command::DumpEmbeddings { checkpoint, features, output } => {
            let (feats, _) = datasim::read_features(&features)?;
            let ckpt = load_model(&checkpoint, feats.cols())?;
            let out = infer_offline(&ckpt.params, &ckpt.config, &feats)?;
            std::fs::write(&output, evalkit::embeddings_to_csv(&out.embeddings))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
