//! Activity labels, appearance-ordered extended training targets, and the
//! permutation utilities (PIT search, optimal speaker mapping) shared by
//! the objective and the scorer.
//!
//! Extended row layout is fixed as [spk0, spk1..spk_{s_max}, ter]: slot 0
//! is the non-speech detector row, the last slot is the termination marker
//! (always zero-labeled). The marker position is a documented convention;
//! it cannot affect learnability.

use std::fmt::Write as _;

use crate::error::LabelError;
use crate::numerics::Tensor;

pub const BCE_CLAMP: f64 = 1e-7;

/// Per-frame binary speaker activity, T x S.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityLabels {
    matrix: Tensor,
    frame_period: f64,
}

impl ActivityLabels {
    pub fn new(matrix: Tensor, frame_period: f64) -> Result<Self, LabelError> {
        for t in 0..matrix.rows() {
            for s in 0..matrix.cols() {
                let v = matrix.at(t, s);
                if v != 0.0 && v != 1.0 {
                    return Err(LabelError::NonBinary { value: v, frame: t, speaker: s });
                }
            }
        }
        Ok(ActivityLabels { matrix, frame_period })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn num_frames(&self) -> usize {
        self.matrix.rows()
    }

    pub fn num_speakers(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_active(&self, frame: usize, speaker: usize) -> bool {
        self.matrix.at(frame, speaker) != 0.0
    }

    /// First frame where the speaker is active, if any.
    pub fn first_active(&self, speaker: usize) -> Option<usize> {
        (0..self.num_frames()).find(|&t| self.is_active(t, speaker))
    }
}

/// Slot indices within an extended label row.
pub fn non_speech_slot() -> usize {
    0
}

pub fn speaker_slot(speaker_index: usize) -> usize {
    speaker_index + 1
}

pub fn termination_slot(s_max: usize) -> usize {
    s_max + 1
}

/// T x (s_max + 2) binary targets in appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLabelSequence {
    matrix: Tensor,
    s_max: usize,
    speaker_count: usize,
    frame_period: f64,
}

impl ExtendedLabelSequence {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    pub fn speaker_count(&self) -> usize {
        self.speaker_count
    }

    pub fn num_frames(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_slots(&self) -> usize {
        self.s_max + 2
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    /// The ordered speaker rows as plain activity labels (appearance order).
    pub fn speaker_labels(&self) -> ActivityLabels {
        let t_len = self.num_frames();
        let mut m = Tensor::zeros(t_len, self.s_max);
        for t in 0..t_len {
            for s in 0..self.s_max {
                m.set(t, s, self.matrix.at(t, speaker_slot(s)));
            }
        }
        ActivityLabels::new(m, self.frame_period).expect("rows are binary")
    }
}

/// Reindexes speakers by first active frame (ties broken by original column
/// index), adds the spk0 non-speech row and the always-zero termination row.
pub fn to_appearance_order(
    labels: &ActivityLabels,
    s_max: usize,
) -> Result<ExtendedLabelSequence, LabelError> {
    let t_len = labels.num_frames();
    let mut order: Vec<(usize, usize)> = (0..labels.num_speakers())
        .filter_map(|s| labels.first_active(s).map(|f| (f, s)))
        .collect();
    if order.len() > s_max {
        return Err(LabelError::TooManySpeakers { active: order.len(), s_max });
    }
    order.sort(); // by (first frame, original index)

    let n_slots = s_max + 2;
    let mut m = Tensor::zeros(t_len, n_slots);
    for (rank, &(_, orig)) in order.iter().enumerate() {
        for t in 0..t_len {
            m.set(t, speaker_slot(rank), labels.matrix().at(t, orig));
        }
    }
    for t in 0..t_len {
        let any_speech = (0..s_max).any(|s| m.at(t, speaker_slot(s)) != 0.0);
        m.set(t, non_speech_slot(), if any_speech { 0.0 } else { 1.0 });
    }
    // termination row stays all zero
    Ok(ExtendedLabelSequence {
        matrix: m,
        s_max,
        speaker_count: order.len(),
        frame_period: labels.frame_period(),
    })
}

fn bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// All permutations of 0..n in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    heap_permute(&mut items, n, &mut out);
    out.sort();
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Exhaustive PIT search: the permutation of prediction columns minimizing
/// the mean frame-wise BCE against the targets, and that minimal loss.
/// `perm[s]` is the prediction column scored against target column `s`.
pub fn pit_best_permutation(
    preds: &Tensor,
    targets: &Tensor,
) -> Result<(Vec<usize>, f64), LabelError> {
    if preds.shape() != targets.shape() {
        return Err(LabelError::ShapeMismatch {
            lhs: preds.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let (t_len, s) = (preds.rows(), preds.cols());
    // pairwise column costs: cost[p][y] = summed BCE of pred col p vs target col y
    let mut cost = vec![vec![0.0f64; s]; s];
    for t in 0..t_len {
        for p in 0..s {
            for y in 0..s {
                cost[p][y] += bce(preds.at(t, p), targets.at(t, y));
            }
        }
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in permutations(s) {
        let total: f64 = (0..s).map(|y| cost[perm[y]][y]).sum();
        let loss = total / t_len.max(1) as f64;
        match &best {
            Some((_, b)) if *b <= loss => {}
            _ => best = Some((perm, loss)),
        }
    }
    Ok(best.expect("at least the identity permutation"))
}

/// Injective mapping from hypothesis columns to reference columns maximizing
/// total both-active frame agreement. Solved exactly by enumerating
/// permutations of the padded square problem (columns are few).
pub fn optimal_speaker_mapping(refs: &ActivityLabels, hyp: &ActivityLabels) -> Vec<Option<usize>> {
    let (sr, sh) = (refs.num_speakers(), hyp.num_speakers());
    let n = sr.max(sh);
    let t_len = refs.num_frames().min(hyp.num_frames());
    // agreement[h][r], padded with zeros for dummy columns
    let mut agree = vec![vec![0u64; n]; n];
    for t in 0..t_len {
        for h in 0..sh {
            if !hyp.is_active(t, h) {
                continue;
            }
            for r in 0..sr {
                if refs.is_active(t, r) {
                    agree[h][r] += 1;
                }
            }
        }
    }
    let mut best_perm: Option<(Vec<usize>, u64)> = None;
    for perm in permutations(n) {
        let total: u64 = (0..n).map(|h| agree[h][perm[h]]).sum();
        match &best_perm {
            Some((_, b)) if *b >= total => {}
            _ => best_perm = Some((perm, total)),
        }
    }
    let (perm, _) = best_perm.expect("nonempty permutation set");
    (0..sh)
        .map(|h| if perm[h] < sr { Some(perm[h]) } else { None })
        .collect()
}

// ---------------------------------------------------------------------------
// Label file formats (shared with the scorer): RTTM-like segments and a
// dense per-frame CSV.

/// One `SPEAKER <rec-id> <onset-sec> <duration-sec> <speaker-id>` line per
/// contiguous active segment.
pub fn to_rttm(labels: &ActivityLabels, rec_id: &str, speaker_names: Option<&[String]>) -> String {
    let mut out = String::new();
    for s in 0..labels.num_speakers() {
        let name = match speaker_names {
            Some(names) => names[s].clone(),
            None => format!("spk{}", s + 1),
        };
        let mut t = 0;
        while t < labels.num_frames() {
            if labels.is_active(t, s) {
                let start = t;
                while t < labels.num_frames() && labels.is_active(t, s) {
                    t += 1;
                }
                let onset = start as f64 * labels.frame_period();
                let dur = (t - start) as f64 * labels.frame_period();
                writeln!(out, "SPEAKER {rec_id} {onset:.3} {dur:.3} {name}").unwrap();
            } else {
                t += 1;
            }
        }
    }
    out
}

/// Parses the RTTM-like format. Speakers become columns in order of first
/// appearance in the file; `num_frames` may extend the matrix past the last
/// segment end.
pub fn from_rttm(
    text: &str,
    frame_period: f64,
    num_frames: Option<usize>,
) -> Result<ActivityLabels, LabelError> {
    let mut segments: Vec<(usize, f64, f64)> = Vec::new(); // (speaker col, onset, dur)
    let mut names: Vec<String> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 5 || tok[0] != "SPEAKER" {
            return Err(LabelError::Parse {
                line: lineno + 1,
                reason: format!("expected `SPEAKER <rec> <onset> <dur> <spk>`, got {line:?}"),
            });
        }
        let onset: f64 = tok[2].parse().map_err(|_| LabelError::Parse {
            line: lineno + 1,
            reason: format!("bad onset {:?}", tok[2]),
        })?;
        let dur: f64 = tok[3].parse().map_err(|_| LabelError::Parse {
            line: lineno + 1,
            reason: format!("bad duration {:?}", tok[3]),
        })?;
        let name = tok[4].to_string();
        let col = match names.iter().position(|n| *n == name) {
            Some(c) => c,
            None => {
                names.push(name);
                names.len() - 1
            }
        };
        segments.push((col, onset, dur));
    }
    let end = segments
        .iter()
        .map(|(_, onset, dur)| onset + dur)
        .fold(0.0f64, f64::max);
    let t_len = num_frames.unwrap_or_else(|| (end / frame_period).round() as usize);
    let s = names.len().max(1);
    let mut m = Tensor::zeros(t_len, s);
    for (col, onset, dur) in segments {
        let first = (onset / frame_period).round() as usize;
        let last = ((onset + dur) / frame_period).round() as usize;
        for t in first..last.min(t_len) {
            m.set(t, col, 1.0);
        }
    }
    ActivityLabels::new(m, frame_period)
}

/// Dense CSV: header `frame_index,spk_1,...,spk_S`, one row per frame.
pub fn to_dense_csv(labels: &ActivityLabels) -> String {
    let mut out = String::from("frame_index");
    for s in 0..labels.num_speakers() {
        write!(out, ",spk_{}", s + 1).unwrap();
    }
    out.push('\n');
    for t in 0..labels.num_frames() {
        write!(out, "{t}").unwrap();
        for s in 0..labels.num_speakers() {
            write!(out, ",{}", labels.matrix().at(t, s) as u8).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn from_dense_csv(text: &str, frame_period: f64) -> Result<ActivityLabels, LabelError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let s = header.split(',').count().saturating_sub(1);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse().unwrap_or(f64::NAN))
            .collect();
        if vals.len() != s {
            return Err(LabelError::ShapeMismatch {
                lhs: vec![rows.len(), vals.len()],
                rhs: vec![rows.len(), s],
            });
        }
        rows.push(vals);
    }
    let mut m = Tensor::zeros(rows.len(), s);
    for (t, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m.set(t, c, *v);
        }
    }
    ActivityLabels::new(m, frame_period)
}
