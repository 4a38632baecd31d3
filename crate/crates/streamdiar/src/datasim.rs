//! Synthetic mixtures for desk-scale training and testing. Each speaker is
//! a unit direction in feature space; active frames sum the directions of
//! the speakers talking plus Gaussian noise, silent frames are pure noise.
//! Speaker activity comes from independent two-state Markov chains whose
//! stationary occupancy is tuned so the expected overlap matches the
//! request. Also reads and writes feature files.

use std::io::Read as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::labels::ActivityLabels;
use crate::numerics::Tensor;
use crate::rng::sub_stream;

pub const MAX_SPEAKERS: usize = 4;

/// Activity density used for single-speaker mixtures, where the overlap
/// ratio imposes no constraint.
const SINGLE_SPEAKER_DENSITY: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub n_speakers: usize,
    pub duration_frames: usize,
    /// Target fraction of speech frames with two or more active speakers.
    pub overlap_ratio: f64,
    /// Mean length of an uninterrupted speaking turn, in frames.
    pub mean_turn_frames: f64,
    pub seed: u64,
    pub feat_dim: usize,
    /// Standard deviation of the per-frame Gaussian noise around the
    /// cluster directions.
    pub cluster_spread: f64,
    pub frame_period: f64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let reject = |reason: String| Err(DataError::InvalidSpec { reason });
        if self.n_speakers == 0 || self.n_speakers > MAX_SPEAKERS {
            return reject(format!(
                "n_speakers {} outside 1..={MAX_SPEAKERS}",
                self.n_speakers
            ));
        }
        if self.duration_frames == 0 {
            return reject("duration_frames must be positive".into());
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return reject(format!("overlap_ratio {} outside [0, 1)", self.overlap_ratio));
        }
        if !(self.mean_turn_frames >= 1.0) {
            return reject(format!("mean_turn_frames {} must be >= 1", self.mean_turn_frames));
        }
        if self.feat_dim == 0 {
            return reject("feat_dim must be positive".into());
        }
        if !(self.cluster_spread >= 0.0) {
            return reject(format!("cluster_spread {} must be >= 0", self.cluster_spread));
        }
        if !(self.frame_period > 0.0) {
            return reject(format!("frame_period {} must be positive", self.frame_period));
        }
        Ok(())
    }
}

/// Expected overlapped-to-speech ratio when each of n speakers is
/// independently active with probability a.
fn overlap_of_occupancy(a: f64, n: usize) -> f64 {
    let q = 1.0 - a;
    let p_any = 1.0 - q.powi(n as i32);
    if p_any <= 0.0 {
        return 0.0;
    }
    let p_single = n as f64 * a * q.powi(n as i32 - 1);
    (p_any - p_single) / p_any
}

/// Per-speaker stationary activity probability hitting the target overlap
/// ratio, by bisection (the ratio is increasing in the occupancy).
fn occupancy_for_overlap(target: f64, n: usize) -> f64 {
    if n == 1 {
        return SINGLE_SPEAKER_DENSITY;
    }
    let (mut lo, mut hi) = (1e-6, 1.0 - 1e-6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if overlap_of_occupancy(mid, n) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic mixture synthesis. Features are rounded to f32 precision
/// so that a binary file round trip is bit-exact.
pub fn generate(spec: &MixtureSpec) -> Result<(Tensor, ActivityLabels), DataError> {
    spec.validate()?;
    let mut rng = sub_stream(spec.seed, "datasim");
    let (t_len, f, n) = (spec.duration_frames, spec.feat_dim, spec.n_speakers);

    // unit cluster direction per speaker
    let mut directions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut d: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        d.iter_mut().for_each(|v| *v /= norm);
        directions.push(d);
    }

    // two-state Markov chain per speaker: leave-speech rate fixes the mean
    // turn length, enter-speech rate fixes the stationary occupancy
    let occupancy = occupancy_for_overlap(spec.overlap_ratio, n);
    let p_off = 1.0 / spec.mean_turn_frames;
    let p_on = (occupancy * p_off / (1.0 - occupancy)).min(1.0);

    let mut activity = Tensor::zeros(t_len, n);
    for s in 0..n {
        let mut active = rng.gen_bool(occupancy);
        for t in 0..t_len {
            if active {
                activity.set(t, s, 1.0);
            }
            let flip = if active { p_off } else { p_on };
            if rng.gen_bool(flip.clamp(0.0, 1.0)) {
                active = !active;
            }
        }
    }

    let mut features = Tensor::zeros(t_len, f);
    for t in 0..t_len {
        for c in 0..f {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mut v = spec.cluster_spread * noise;
            for (s, dir) in directions.iter().enumerate() {
                if activity.at(t, s) == 1.0 {
                    v += dir[c];
                }
            }
            features.set(t, c, f32_round(v));
        }
    }

    let labels = ActivityLabels::new(activity, spec.frame_period)
        .expect("activity matrix is binary by construction");
    Ok((features, labels))
}

/// Fraction of speech frames with two or more active speakers.
pub fn measured_overlap(labels: &ActivityLabels) -> f64 {
    let mut speech = 0usize;
    let mut overlapped = 0usize;
    for t in 0..labels.num_frames() {
        let n = (0..labels.num_speakers()).filter(|&s| labels.is_active(t, s)).count();
        if n >= 1 {
            speech += 1;
        }
        if n >= 2 {
            overlapped += 1;
        }
    }
    if speech == 0 {
        0.0
    } else {
        overlapped as f64 / speech as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureFormat {
    /// Self-describing binary: magic, version, F, frame period, T, then
    /// row-major f32 little-endian samples.
    Binary,
    /// Plain CSV with a frame_period header line.
    Csv,
}

impl FeatureFormat {
    /// Binary for `.bin`, CSV for `.csv`.
    pub fn from_path(path: &Path) -> Option<FeatureFormat> {
        match path.extension()?.to_str()? {
            "bin" => Some(FeatureFormat::Binary),
            "csv" => Some(FeatureFormat::Csv),
            _ => None,
        }
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"FRAMFEAT";
const FEATURE_VERSION: u32 = 1;

fn bad(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::BadFeatureFile { path: path.display().to_string(), reason: reason.into() }
}

pub fn save_features(
    path: &Path,
    features: &Tensor,
    frame_period: f64,
    format: FeatureFormat,
) -> Result<(), DataError> {
    match format {
        FeatureFormat::Binary => {
            let mut buf = Vec::with_capacity(32 + features.len() * 4);
            buf.extend_from_slice(FEATURE_MAGIC);
            buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
            buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
            buf.extend_from_slice(&frame_period.to_le_bytes());
            buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
            for &v in features.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            std::fs::write(path, buf)?;
        }
        FeatureFormat::Csv => {
            let mut out = String::new();
            out.push_str(&format!("frame_period,{frame_period}\n"));
            for t in 0..features.rows() {
                let row: Vec<String> = features.row(t).iter().map(|v| format!("{v}")).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            std::fs::write(path, out)?;
        }
    }
    Ok(())
}

/// Reads a feature file; NaN or infinite entries are rejected with their
/// position.
pub fn load_features(path: &Path, format: FeatureFormat) -> Result<(Tensor, f64), DataError> {
    match format {
        FeatureFormat::Binary => load_binary(path),
        FeatureFormat::Csv => load_csv(path),
    }
}

fn load_binary(path: &Path) -> Result<(Tensor, f64), DataError> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 28];
    file.read_exact(&mut header)
        .map_err(|_| bad(path, "truncated header"))?;
    if &header[0..8] != FEATURE_MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let f = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let frame_period = f64::from_le_bytes(header[16..24].try_into().unwrap());
    let t_len = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
    if f == 0 || !(frame_period > 0.0) {
        return Err(bad(path, format!("invalid header: F {f}, frame_period {frame_period}")));
    }
    let mut payload = vec![0u8; t_len * f * 4];
    file.read_exact(&mut payload)
        .map_err(|_| bad(path, format!("truncated payload, expected {t_len}x{f} f32s")))?;
    let mut data = Vec::with_capacity(t_len * f);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(bad(path, format!("non-finite value at frame {}, dim {}", i / f, i % f)));
        }
        data.push(v);
    }
    Ok((Tensor::new(vec![t_len, f], data), frame_period))
}

fn load_csv(path: &Path) -> Result<(Tensor, f64), DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(path, "empty file"))?;
    let frame_period = header
        .strip_prefix("frame_period,")
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| *v > 0.0)
        .ok_or_else(|| bad(path, "first line must be frame_period,<seconds>"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(path, format!("line {}: bad number in column {col}", lineno + 1)))?;
            if !v.is_finite() {
                return Err(bad(path, format!("non-finite value at line {}, column {col}", lineno + 1)));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(bad(path, format!("line {}: {} columns, expected {}", lineno + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad(path, "no feature rows"));
    }
    Ok((Tensor::from_rows(&rows), frame_period))
}

/// save followed by load must reproduce the features bit-exactly (they are
/// f32-representable by construction).
pub fn write_features(path: &Path, features: &Tensor, frame_period: f64) -> Result<(), DataError> {
    let format = FeatureFormat::from_path(path)
        .ok_or_else(|| bad(path, "unknown extension, expected .bin or .csv"))?;
    save_features(path, features, frame_period, format)
}

pub fn read_features(path: &Path) -> Result<(Tensor, f64), DataError> {
    let format = FeatureFormat::from_path(path)
        .ok_or_else(|| bad(path, "unknown extension, expected .bin or .csv"))?;
    load_features(path, format)
}

impl MixtureSpec {
    pub fn toy(n_speakers: usize, seed: u64) -> MixtureSpec {
        MixtureSpec {
            n_speakers,
            duration_frames: 200,
            overlap_ratio: 0.2,
            mean_turn_frames: 20.0,
            seed,
            feat_dim: 16,
            cluster_spread: 0.1,
            frame_period: 0.1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn single_speaker_single_column() {
        let spec = MixtureSpec { n_speakers: 1, ..MixtureSpec::toy(1, 5) };
        let (_, labels) = generate(&spec).unwrap();
        assert_eq!(labels.num_speakers(), 1);
        assert!(labels.first_active(0).is_some());
    }

    #[test]
    fn deterministic_per_seed_and_distinct_across_seeds() {
        let spec = MixtureSpec::toy(2, 9);
        let (fa, la) = generate(&spec).unwrap();
        let (fb, lb) = generate(&spec).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(la.matrix(), lb.matrix());
        let (fc, _) = generate(&MixtureSpec::toy(2, 10)).unwrap();
        assert_ne!(fa, fc);
    }

    #[test]
    fn overlap_tracks_request() {
        for &target in &[0.1, 0.3] {
            let mut total = 0.0;
            for seed in 0..50 {
                let spec = MixtureSpec {
                    overlap_ratio: target,
                    duration_frames: 400,
                    ..MixtureSpec::toy(2, seed)
                };
                let (_, labels) = generate(&spec).unwrap();
                total += measured_overlap(&labels);
            }
            let mean = total / 50.0;
            assert!(
                (mean - target).abs() <= 0.1,
                "target {target}: measured {mean}"
            );
        }
    }

    #[test]
    fn silent_frames_are_pure_noise() {
        // zero noise: silent frames must be exactly zero
        let spec = MixtureSpec { cluster_spread: 0.0, ..MixtureSpec::toy(2, 3) };
        let (features, labels) = generate(&spec).unwrap();
        for t in 0..labels.num_frames() {
            let silent = (0..2).all(|s| !labels.is_active(t, s));
            if silent {
                assert!(features.row(t).iter().all(|v| *v == 0.0), "frame {t}");
            }
        }
    }

    #[test]
    fn active_frames_sum_cluster_directions() {
        let spec = MixtureSpec { cluster_spread: 0.0, ..MixtureSpec::toy(2, 3) };
        let (features, labels) = generate(&spec).unwrap();
        // with zero noise a solo frame of a speaker has unit norm, an
        // overlapped frame is the sum of two unit directions
        for t in 0..labels.num_frames() {
            let n = (0..2).filter(|&s| labels.is_active(t, s)).count();
            let norm: f64 = features.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 1 {
                assert!((norm - 1.0).abs() < 1e-6, "frame {t} norm {norm}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&MixtureSpec { n_speakers: 0, ..MixtureSpec::toy(1, 0) }).is_err());
        assert!(generate(&MixtureSpec { n_speakers: 5, ..MixtureSpec::toy(1, 0) }).is_err());
        assert!(generate(&MixtureSpec { overlap_ratio: 1.0, ..MixtureSpec::toy(2, 0) }).is_err());
        assert!(generate(&MixtureSpec { overlap_ratio: -0.1, ..MixtureSpec::toy(2, 0) }).is_err());
        assert!(generate(&MixtureSpec { duration_frames: 0, ..MixtureSpec::toy(2, 0) }).is_err());
        assert!(generate(&MixtureSpec { feat_dim: 0, ..MixtureSpec::toy(2, 0) }).is_err());
    }

    #[test]
    fn binary_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mix.bin");
        let (features, labels) = generate(&MixtureSpec::toy(3, 21)).unwrap();
        write_features(&path, &features, labels.frame_period()).unwrap();
        let (loaded, fp) = read_features(&path).unwrap();
        assert_eq!(loaded, features);
        assert_eq!(fp, labels.frame_period());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mix.csv");
        let (features, labels) = generate(&MixtureSpec::toy(2, 8)).unwrap();
        write_features(&path, &features, labels.frame_period()).unwrap();
        let (loaded, fp) = read_features(&path).unwrap();
        assert_eq!(fp, labels.frame_period());
        assert!(loaded.max_abs_diff(&features) < 1e-12);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC others").unwrap();
        assert!(matches!(read_features(&path), Err(DataError::BadFeatureFile { .. })));

        let nan_csv = dir.path().join("bad.csv");
        std::fs::write(&nan_csv, "frame_period,0.1\n1.0,NaN\n").unwrap();
        let err = read_features(&nan_csv).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn occupancy_bisection_hits_expected_overlap() {
        for &(target, n) in &[(0.1, 2usize), (0.3, 3), (0.5, 4)] {
            let a = occupancy_for_overlap(target, n);
            let got = overlap_of_occupancy(a, n);
            assert!((got - target).abs() < 1e-9, "n {n}: {got} vs {target}");
        }
    }
}
