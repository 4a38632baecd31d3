//! Scoring: frame-level diarization error rate with a boundary collar,
//! under either an optimal or an appearance-order speaker mapping, plus
//! corpus-level aggregation and embedding export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::LabelError;
use crate::labels::{optimal_speaker_mapping, ActivityLabels};
use crate::numerics::Tensor;

/// How hypothesis speakers are matched to reference speakers before
/// counting confusions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MappingMode {
    /// Injective mapping maximizing both-active agreement over the scored
    /// frames. The standard scoring choice; a lower bound on the error of
    /// any fixed mapping.
    Optimal,
    /// k-th hypothesis speaker (by first activity) paired with the k-th
    /// reference speaker (by first activity). Matches a system whose output
    /// slots are in order of appearance, so it scores slot assignment too.
    Appearance,
}

/// Frame counts are in frames of the reference frame period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerReport {
    pub missed_speech: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    /// Total reference speaker-frames in the scored region.
    pub scored_speech: f64,
    /// Frames surviving the collar.
    pub scored_frames: usize,
    /// (miss + false alarm + confusion) / scored speech. 0 when both the
    /// numerator and denominator are zero, infinite when there are errors
    /// but no reference speech.
    pub der: f64,
}

impl DerReport {
    fn from_counts(miss: f64, fa: f64, conf: f64, speech: f64, frames: usize) -> DerReport {
        let errors = miss + fa + conf;
        let der = if speech > 0.0 {
            errors / speech
        } else if errors > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        DerReport {
            missed_speech: miss,
            false_alarm: fa,
            confusion: conf,
            scored_speech: speech,
            scored_frames: frames,
            der,
        }
    }
}

/// Frames kept after excluding a collar around every reference activity
/// transition. Frame t covers [t, t+1) * frame_period; it is dropped when
/// that interval intersects the open window (boundary - collar, boundary +
/// collar) of any per-speaker onset or offset, including onsets at frame 0.
pub fn scored_frame_mask(refs: &ActivityLabels, collar_seconds: f64) -> Vec<bool> {
    let t_len = refs.num_frames();
    let fp = refs.frame_period();
    let mut scored = vec![true; t_len];
    if collar_seconds <= 0.0 {
        return scored;
    }
    let mut boundaries = Vec::new();
    for s in 0..refs.num_speakers() {
        let mut prev = false;
        for t in 0..t_len {
            let cur = refs.is_active(t, s);
            if cur != prev {
                boundaries.push(t as f64 * fp);
            }
            prev = cur;
        }
        if prev {
            // activity running into the end of the recording ends there
            boundaries.push(t_len as f64 * fp);
        }
    }
    for b in boundaries {
        let lo = b - collar_seconds;
        let hi = b + collar_seconds;
        let first = (lo / fp).floor().max(0.0) as usize;
        for (t, flag) in scored.iter_mut().enumerate().skip(first) {
            let start = t as f64 * fp;
            if start >= hi {
                break;
            }
            if start + fp > lo {
                *flag = false;
            }
        }
    }
    scored
}

fn appearance_mapping(refs: &ActivityLabels, hyp: &ActivityLabels) -> Vec<Option<usize>> {
    let order = |l: &ActivityLabels| -> Vec<usize> {
        let mut active: Vec<(usize, usize)> = (0..l.num_speakers())
            .filter_map(|s| l.first_active(s).map(|t| (t, s)))
            .collect();
        active.sort();
        active.into_iter().map(|(_, s)| s).collect()
    };
    let ref_order = order(refs);
    let hyp_order = order(hyp);
    let mut mapping = vec![None; hyp.num_speakers()];
    for (k, &h) in hyp_order.iter().enumerate() {
        mapping[h] = ref_order.get(k).copied();
    }
    mapping
}

fn masked(labels: &ActivityLabels, scored: &[bool]) -> ActivityLabels {
    let kept: Vec<usize> = scored
        .iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .map(|(t, _)| t)
        .collect();
    let mut m = Tensor::zeros(kept.len(), labels.num_speakers());
    for (i, &t) in kept.iter().enumerate() {
        for s in 0..labels.num_speakers() {
            if t < labels.num_frames() && labels.is_active(t, s) {
                m.set(i, s, 1.0);
            }
        }
    }
    ActivityLabels::new(m, labels.frame_period()).expect("binary by construction")
}

/// Frame-level diarization error rate; overlapped speech is scored.
pub fn der(
    refs: &ActivityLabels,
    hyp: &ActivityLabels,
    collar_seconds: f64,
    mode: MappingMode,
) -> Result<DerReport, LabelError> {
    if (refs.frame_period() - hyp.frame_period()).abs() > 1e-12 {
        return Err(LabelError::FramePeriodMismatch {
            lhs: refs.frame_period(),
            rhs: hyp.frame_period(),
        });
    }
    let scored = scored_frame_mask(refs, collar_seconds);
    let mapping = match mode {
        MappingMode::Optimal => {
            // mapped on the scored region only, like the counts
            optimal_speaker_mapping(&masked(refs, &scored), &masked(hyp, &scored))
        }
        MappingMode::Appearance => appearance_mapping(refs, hyp),
    };

    let t_len = refs.num_frames().max(hyp.num_frames());
    let (mut miss, mut fa, mut conf, mut speech) = (0.0, 0.0, 0.0, 0.0);
    let mut frames = 0usize;
    for t in 0..t_len {
        if !*scored.get(t).unwrap_or(&true) {
            continue;
        }
        frames += 1;
        let n_ref = (0..refs.num_speakers())
            .filter(|&s| t < refs.num_frames() && refs.is_active(t, s))
            .count();
        let n_hyp = (0..hyp.num_speakers())
            .filter(|&s| t < hyp.num_frames() && hyp.is_active(t, s))
            .count();
        let n_correct = (0..hyp.num_speakers())
            .filter(|&h| {
                t < hyp.num_frames()
                    && hyp.is_active(t, h)
                    && mapping[h].is_some_and(|r| t < refs.num_frames() && refs.is_active(t, r))
            })
            .count();
        speech += n_ref as f64;
        miss += (n_ref as f64 - n_hyp as f64).max(0.0);
        fa += (n_hyp as f64 - n_ref as f64).max(0.0);
        conf += n_ref.min(n_hyp) as f64 - n_correct as f64;
    }
    Ok(DerReport::from_counts(miss, fa, conf, speech, frames))
}

/// Pooled scores for a recording set: error counts are summed over
/// recordings before dividing, and also broken down by the number of
/// reference speakers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusReport {
    pub overall: DerReport,
    /// (reference speaker count, pooled report over those recordings)
    pub by_speaker_count: Vec<(usize, DerReport)>,
}

pub fn evaluate_corpus(
    pairs: &[(ActivityLabels, ActivityLabels)],
    collar_seconds: f64,
    mode: MappingMode,
) -> Result<CorpusReport, LabelError> {
    let mut per_count: indexmap::IndexMap<usize, Vec<DerReport>> = indexmap::IndexMap::new();
    let mut all = Vec::with_capacity(pairs.len());
    for (refs, hyp) in pairs {
        let r = der(refs, hyp, collar_seconds, mode)?;
        let n_active = (0..refs.num_speakers())
            .filter(|&s| refs.first_active(s).is_some())
            .count();
        per_count.entry(n_active).or_default().push(r);
        all.push(r);
    }
    let pool = |rs: &[DerReport]| {
        DerReport::from_counts(
            rs.iter().map(|r| r.missed_speech).sum(),
            rs.iter().map(|r| r.false_alarm).sum(),
            rs.iter().map(|r| r.confusion).sum(),
            rs.iter().map(|r| r.scored_speech).sum(),
            rs.iter().map(|r| r.scored_frames).sum(),
        )
    };
    let mut by_speaker_count: Vec<(usize, DerReport)> =
        per_count.iter().map(|(n, rs)| (*n, pool(rs))).collect();
    by_speaker_count.sort_by_key(|(n, _)| *n);
    Ok(CorpusReport { overall: pool(&all), by_speaker_count })
}

/// Frame embeddings as CSV: `frame,dim_0,...,dim_{D-1}`.
pub fn embeddings_to_csv(emb: &Tensor) -> String {
    let mut out = String::new();
    out.push_str("frame");
    for d in 0..emb.cols() {
        let _ = write!(out, ",dim_{d}");
    }
    out.push('\n');
    for t in 0..emb.rows() {
        let _ = write!(out, "{t}");
        for &v in emb.row(t) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_stream;
    use rand::Rng;

    fn acts(rows: &[&[f64]]) -> ActivityLabels {
        let m = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        ActivityLabels::new(m, 0.1).unwrap()
    }

    fn random_acts(seed: u64, t_len: usize, s: usize, p: f64) -> ActivityLabels {
        let mut rng = sub_stream(seed, "eval-test");
        let m = Tensor::new(
            vec![t_len, s],
            (0..t_len * s).map(|_| f64::from(rng.gen_bool(p))).collect(),
        );
        ActivityLabels::new(m, 0.1).unwrap()
    }

    #[test]
    fn perfect_hypothesis_scores_zero() {
        let r = random_acts(1, 50, 3, 0.3);
        let report = der(&r, &r, 0.0, MappingMode::Optimal).unwrap();
        assert_eq!(report.der, 0.0);
        assert_eq!(report.scored_frames, 50);
    }

    #[test]
    fn pure_miss_and_false_alarm() {
        // ref: spk0 active frames 0..4; hyp silent
        let r = acts(&[&[1.0], &[1.0], &[1.0], &[1.0], &[0.0]]);
        let h = acts(&[&[0.0], &[0.0], &[0.0], &[0.0], &[0.0]]);
        let rep = der(&r, &h, 0.0, MappingMode::Optimal).unwrap();
        assert_eq!(rep.missed_speech, 4.0);
        assert_eq!(rep.false_alarm, 0.0);
        assert_eq!(rep.der, 1.0);

        let rep = der(&h, &r, 0.0, MappingMode::Optimal).unwrap();
        assert_eq!(rep.false_alarm, 4.0);
        assert!(rep.der.is_infinite());
    }

    #[test]
    fn optimal_mapping_repairs_swapped_columns() {
        let r = acts(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let h = acts(&[&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let rep = der(&r, &h, 0.0, MappingMode::Optimal).unwrap();
        assert_eq!(rep.der, 0.0);
    }

    #[test]
    fn merged_speakers_count_as_confusion() {
        // hyp attributes everything to one speaker; the minority ref
        // speaker's frame becomes confusion under the best mapping
        let r = acts(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let h = acts(&[&[1.0], &[1.0], &[1.0]]);
        let rep = der(&r, &h, 0.0, MappingMode::Optimal).unwrap();
        assert_eq!(rep.confusion, 1.0);
        assert_eq!(rep.missed_speech, 0.0);
        assert_eq!(rep.false_alarm, 0.0);
        assert!((rep.der - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn appearance_scores_slot_order() {
        // same speech, but hyp puts the first-appearing speaker in column 1:
        // appearance mapping pairs them correctly, so still zero error
        let r = acts(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let h = acts(&[&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let rep = der(&r, &h, 0.0, MappingMode::Appearance).unwrap();
        assert_eq!(rep.der, 0.0);

        // hyp order flipped relative to appearance: all confusion
        let h2 = acts(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let r2 = acts(&[&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(der(&r2, &h2, 0.0, MappingMode::Appearance).unwrap().der, 0.0);
    }

    #[test]
    fn appearance_never_beats_optimal() {
        for seed in 0..30u64 {
            let r = random_acts(seed, 40, 3, 0.3);
            let h = random_acts(seed + 100, 40, 3, 0.3);
            let opt = der(&r, &h, 0.0, MappingMode::Optimal).unwrap();
            let app = der(&r, &h, 0.0, MappingMode::Appearance).unwrap();
            assert!(
                app.der >= opt.der - 1e-12,
                "seed {seed}: appearance {} < optimal {}",
                app.der,
                opt.der
            );
        }
    }

    #[test]
    fn collar_excludes_boundary_frames() {
        // one onset at frame 5 (t = 0.5 s), one offset at frame 8
        let mut m = Tensor::zeros(20, 1);
        for t in 5..8 {
            m.set(t, 0, 1.0);
        }
        let r = ActivityLabels::new(m, 0.1).unwrap();
        let scored = scored_frame_mask(&r, 0.25);
        // collar (0.25, 0.75) excludes frames overlapping it: 2..=7 for the
        // onset; (0.55, 1.05) excludes 5..=10 for the offset
        for t in 0..20 {
            let expect = !(2..=10).contains(&t);
            assert_eq!(scored[t], expect, "frame {t}");
        }
        assert!(scored_frame_mask(&r, 0.0).iter().all(|s| *s));
    }

    #[test]
    fn collar_widening_is_monotone() {
        let r = random_acts(7, 60, 2, 0.3);
        let mut prev = usize::MAX;
        for collar in [0.0, 0.1, 0.25, 0.5] {
            let n = scored_frame_mask(&r, collar).iter().filter(|s| **s).count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn errors_inside_collar_are_forgiven() {
        // hyp is wrong only within the collar region around the onset
        let r = acts(&[&[0.0], &[0.0], &[0.0], &[1.0], &[1.0], &[1.0], &[1.0], &[1.0]]);
        let h = acts(&[&[0.0], &[0.0], &[1.0], &[0.0], &[1.0], &[1.0], &[1.0], &[1.0]]);
        let strict = der(&r, &h, 0.0, MappingMode::Optimal).unwrap();
        assert!(strict.der > 0.0);
        let lenient = der(&r, &h, 0.25, MappingMode::Optimal).unwrap();
        assert_eq!(lenient.der, 0.0);
    }

    #[test]
    fn corpus_pools_counts_not_rates() {
        // recording A: 1 error frame of 1 speech frame; B: 0 of 9.
        // pooled DER is 1/10, not the mean of 1.0 and 0.0
        let ra = acts(&[&[1.0]]);
        let ha = acts(&[&[0.0]]);
        let rb = random_acts(3, 9, 1, 1.0);
        let report =
            evaluate_corpus(&[(ra, ha), (rb.clone(), rb)], 0.0, MappingMode::Optimal).unwrap();
        assert!((report.overall.der - 0.1).abs() < 1e-12);
        assert_eq!(report.by_speaker_count.len(), 1);
    }

    #[test]
    fn csv_export_shape() {
        let emb = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let csv = embeddings_to_csv(&emb);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec!["frame,dim_0,dim_1", "0,1,2", "1,3,4"]);
    }
}
