//! Dense row-major f64 tensors and the forward primitives the model is
//! built from. Gradients live in [`crate::numerics::autodiff`]; everything
//! here is pure and deterministic.

use crate::error::NumericsError;

/// Dense real tensor, row-major. Effectively 2-D throughout this crate
/// (scalars are 1x1), but the shape is kept as a vector so concatenation
/// helpers stay generic.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(vec![rows, cols], vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1, 1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Lower-triangular ones (diagonal included); the causal attention mask.
    pub fn lower_triangular(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                t.data[i * n + j] = 1.0;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    check_same_shape("add", a, b)?;
    Ok(Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    check_same_shape("mul", a, b)?;
    Ok(Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Adds a 1xD bias row to every row of a TxD matrix.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    if bias.rows() != 1 || bias.cols() != a.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "add_row",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    let cols = a.cols();
    for r in 0..a.rows() {
        for c in 0..cols {
            out.data[r * cols + c] += bias.data[c];
        }
    }
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.cols() != b.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    out
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax with a binary mask; masked positions get exactly zero
/// probability. Stabilized by subtracting the row max over allowed entries.
pub fn masked_softmax(scores: &Tensor, mask: &Tensor) -> Result<Tensor, NumericsError> {
    check_same_shape("masked_softmax", scores, mask)?;
    let (m, n) = (scores.rows(), scores.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let srow = scores.row(i);
        let mrow = mask.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if mrow[j] != 0.0 && srow[j] > max {
                max = srow[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::FullyMaskedRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..n {
            if mrow[j] != 0.0 {
                let e = (srow[j] - max).exp();
                out.data[i * n + j] = e;
                sum += e;
            }
        }
        for j in 0..n {
            out.data[i * n + j] /= sum;
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis with affine gain/bias (both 1xD).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    let d = x.cols();
    if gain.cols() != d || bias.cols() != d || gain.rows() != 1 || bias.rows() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    assert!(eps > 0.0, "layer_norm eps must be positive");
    let mut out = Tensor::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            out.data[r * d + c] = (row[c] - mean) * inv * gain.data[c] + bias.data[c];
        }
    }
    Ok(out)
}

/// Floor used when normalizing; defines the zero-vector case instead of
/// erroring during early training.
pub const L2_NORM_FLOOR: f64 = 1e-12;

/// Normalizes each row to unit L2 norm, dividing by max(norm, 1e-12).
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / norm.max(L2_NORM_FLOOR);
        for c in 0..d {
            out.data[r * d + c] *= inv;
        }
    }
    out
}

/// How the time convolution mixes channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvKind {
    /// Full channel mixing: weight is (kernel_size * D_in) x D_out.
    ChannelMix,
    /// Per-channel: weight is kernel_size x D.
    Depthwise,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub left_pad: usize,
    pub right_pad: usize,
    pub kind: ConvKind,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.kernel_size < 1 {
            return Err(NumericsError::BadKernel {
                kernel_size: self.kernel_size,
            });
        }
        if self.left_pad + self.right_pad != self.kernel_size - 1 {
            return Err(NumericsError::BadPadding {
                kernel_size: self.kernel_size,
                left_pad: self.left_pad,
                right_pad: self.right_pad,
            });
        }
        Ok(())
    }
}

/// 1-D convolution along the time (row) axis with zero padding at the
/// boundaries. Output frame t reads input frames t-left_pad .. t+right_pad.
pub fn conv1d_time(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor, NumericsError> {
    spec.validate()?;
    let (t_len, d_in) = (x.rows(), x.cols());
    let k = spec.kernel_size;
    let d_out = match spec.kind {
        ConvKind::ChannelMix => {
            if weight.rows() != k * d_in {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv1d_time",
                    lhs: x.shape().to_vec(),
                    rhs: weight.shape().to_vec(),
                });
            }
            weight.cols()
        }
        ConvKind::Depthwise => {
            if weight.rows() != k || weight.cols() != d_in {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv1d_time",
                    lhs: x.shape().to_vec(),
                    rhs: weight.shape().to_vec(),
                });
            }
            d_in
        }
    };
    if bias.rows() != 1 || bias.cols() != d_out {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d_time",
            lhs: vec![1, d_out],
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(t_len, d_out);
    for t in 0..t_len {
        for tap in 0..k {
            // tap 0 reads the oldest frame in the window
            let src = t as isize - spec.left_pad as isize + tap as isize;
            if src < 0 || src >= t_len as isize {
                continue; // zero padding
            }
            let xrow = x.row(src as usize);
            match spec.kind {
                ConvKind::ChannelMix => {
                    for ci in 0..d_in {
                        let xv = xrow[ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = weight.row(tap * d_in + ci);
                        let orow = &mut out.data[t * d_out..(t + 1) * d_out];
                        for co in 0..d_out {
                            orow[co] += xv * wrow[co];
                        }
                    }
                }
                ConvKind::Depthwise => {
                    let wrow = weight.row(tap);
                    for c in 0..d_in {
                        out.data[t * d_out + c] += xrow[c] * wrow[c];
                    }
                }
            }
        }
        for c in 0..d_out {
            out.data[t * d_out + c] += bias.data[c];
        }
    }
    Ok(out)
}

/// Columns start..start+len of a matrix.
pub fn col_slice(x: &Tensor, start: usize, len: usize) -> Tensor {
    assert!(start + len <= x.cols(), "col_slice out of range");
    let mut out = Tensor::zeros(x.rows(), len);
    for r in 0..x.rows() {
        out.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
    }
    out
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.rows() != b.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "concat_cols",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut out = Tensor::zeros(a.rows(), ca + cb);
    for r in 0..a.rows() {
        out.data[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(a.row(r));
        out.data[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(b.row(r));
    }
    Ok(out)
}

/// Stacks row `row` of each source matrix into an NxD matrix.
pub fn gather_rows(srcs: &[&Tensor], row: usize) -> Tensor {
    let d = srcs[0].cols();
    let mut out = Tensor::zeros(srcs.len(), d);
    for (i, s) in srcs.iter().enumerate() {
        assert_eq!(s.cols(), d);
        out.data[i * d..(i + 1) * d].copy_from_slice(s.row(row));
    }
    out
}

/// Row-wise dot product of two TxD matrices, producing Tx1.
pub fn rowwise_dot(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    check_same_shape("rowwise_dot", a, b)?;
    let mut out = Tensor::zeros(a.rows(), 1);
    for r in 0..a.rows() {
        out.data[r] = a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum();
    }
    Ok(out)
}

pub fn sum_all(a: &Tensor) -> f64 {
    a.data.iter().sum()
}
