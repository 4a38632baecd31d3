//! Reverse-mode autodiff over the tensor primitives.
//!
//! A [`Tape`] records one forward computation; `backward()` replays it in
//! reverse and accumulates adjoints. Tapes are rebuilt per training step
//! (no persistent graph) and belong to a single thread.

use crate::error::NumericsError;

use super::params::Params;
use super::tensor::{self, ConvSpec, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Relu(usize),
    MaskedSoftmax { x: usize, mask: Tensor },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Conv1d { x: usize, weight: usize, bias: usize, spec: ConvSpec },
    L2NormRows(usize),
    ConcatCols(usize, usize),
    ColSlice { x: usize, start: usize, len: usize },
    GatherRows { srcs: Vec<usize>, row: usize },
    RowwiseDot(usize, usize),
    BceMean { yhat: usize, targets: Tensor, clamp: f64 },
    SqDiffMean { x: usize, target: Tensor },
    SumAll(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward()` target w.r.t. `v`. Zero-shaped
    /// tensors are returned for nodes the target does not depend on.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => self.nodes[v.0].value.map(|_| 0.0),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable input (data, masks baked as values).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = tensor::add(self.value(a), self.value(b))?;
        let g = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Op::Add(a.0, b.0), v, g))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let v = tensor::add_row(self.value(a), self.value(bias))?;
        let g = self.ng(a.0) || self.ng(bias.0);
        Ok(self.push(Op::AddRow(a.0, bias.0), v, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        let g = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Op::Mul(a.0, b.0), v, g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = tensor::scale(self.value(a), c);
        let g = self.ng(a.0);
        self.push(Op::Scale(a.0, c), v, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let g = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Op::Matmul(a.0, b.0), v, g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = tensor::transpose(self.value(a));
        let g = self.ng(a.0);
        self.push(Op::Transpose(a.0), v, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = tensor::sigmoid(self.value(a));
        let g = self.ng(a.0);
        self.push(Op::Sigmoid(a.0), v, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = tensor::relu(self.value(a));
        let g = self.ng(a.0);
        self.push(Op::Relu(a.0), v, g)
    }

    pub fn masked_softmax(&mut self, scores: Var, mask: Tensor) -> Result<Var, NumericsError> {
        let v = tensor::masked_softmax(self.value(scores), &mask)?;
        let g = self.ng(scores.0);
        Ok(self.push(Op::MaskedSoftmax { x: scores.0, mask }, v, g))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let v = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let g = self.ng(x.0) || self.ng(gain.0) || self.ng(bias.0);
        Ok(self.push(Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps }, v, g))
    }

    pub fn conv1d_time(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    ) -> Result<Var, NumericsError> {
        let v = tensor::conv1d_time(self.value(x), self.value(weight), self.value(bias), &spec)?;
        let g = self.ng(x.0) || self.ng(weight.0) || self.ng(bias.0);
        Ok(self.push(Op::Conv1d { x: x.0, weight: weight.0, bias: bias.0, spec }, v, g))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = tensor::l2_normalize_rows(self.value(x));
        let g = self.ng(x.0);
        self.push(Op::L2NormRows(x.0), v, g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = tensor::concat_cols(self.value(a), self.value(b))?;
        let g = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Op::ConcatCols(a.0, b.0), v, g))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = tensor::col_slice(self.value(x), start, len);
        let g = self.ng(x.0);
        self.push(Op::ColSlice { x: x.0, start, len }, v, g)
    }

    /// Row `row` of each source, stacked into an NxD matrix.
    pub fn gather_rows(&mut self, srcs: &[Var], row: usize) -> Var {
        let refs: Vec<&Tensor> = srcs.iter().map(|v| self.value(*v)).collect();
        let v = tensor::gather_rows(&refs, row);
        let g = srcs.iter().any(|s| self.ng(s.0));
        self.push(
            Op::GatherRows { srcs: srcs.iter().map(|s| s.0).collect(), row },
            v,
            g,
        )
    }

    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = tensor::rowwise_dot(self.value(a), self.value(b))?;
        let g = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Op::RowwiseDot(a.0, b.0), v, g))
    }

    /// Mean-over-rows of the summed-over-columns binary cross-entropy,
    /// with posteriors clamped to [clamp, 1-clamp].
    pub fn bce_mean(&mut self, yhat: Var, targets: Tensor, clamp: f64) -> Result<Var, NumericsError> {
        let y = self.value(yhat);
        if y.shape() != targets.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_mean",
                lhs: y.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let t_len = y.rows() as f64;
        let mut loss = 0.0;
        for (p, t) in y.data().iter().zip(targets.data()) {
            let pc = p.clamp(clamp, 1.0 - clamp);
            loss += -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        }
        loss /= t_len;
        let g = self.ng(yhat.0);
        Ok(self.push(Op::BceMean { yhat: yhat.0, targets, clamp }, Tensor::scalar(loss), g))
    }

    /// Mean of (x - target)^2 over all entries.
    pub fn sq_diff_mean(&mut self, x: Var, target: Tensor) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "sq_diff_mean",
                lhs: xv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = xv.len() as f64;
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let g = self.ng(x.0);
        Ok(self.push(Op::SqDiffMean { x: x.0, target }, Tensor::scalar(loss), g))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(tensor::sum_all(self.value(x)));
        let g = self.ng(x.0);
        self.push(Op::SumAll(x.0), v, g)
    }

    /// Reverse pass from a scalar output. Visits each recorded node exactly
    /// once, in reverse order.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward target must be scalar");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[out.0] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            // Take the op out so the node table stays mutably borrowable
            // while adjoints accumulate into earlier nodes.
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backprop_node(id, &g, &op);
            self.nodes[id].op = op;
            self.grads[id] = Some(g);
        }
    }

    fn accumulate(&mut self, id: usize, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, id: usize, g: &Tensor, op: &Op) {
        // Values are read before mutation of grads; ops reference earlier ids only.
        match op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            &Op::AddRow(a, bias) => {
                self.accumulate(a, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gb.data_mut()[c] += g.at(r, c);
                    }
                }
                self.accumulate(bias, gb);
            }
            &Op::Mul(a, b) => {
                let ga = tensor::mul(g, &self.nodes[b].value).unwrap();
                let gb = tensor::mul(g, &self.nodes[a].value).unwrap();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Scale(a, c) => {
                self.accumulate(a, tensor::scale(g, c));
            }
            &Op::Matmul(a, b) => {
                let bt = tensor::transpose(&self.nodes[b].value);
                let at = tensor::transpose(&self.nodes[a].value);
                let ga = tensor::matmul(g, &bt).unwrap();
                let gb = tensor::matmul(&at, g).unwrap();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Transpose(a) => {
                self.accumulate(a, tensor::transpose(g));
            }
            &Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let dy = y.map(|v| v * (1.0 - v));
                self.accumulate(a, tensor::mul(g, &dy).unwrap());
            }
            &Op::Relu(a) => {
                let x = &self.nodes[a].value;
                let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(a, tensor::mul(g, &mask).unwrap());
            }
            Op::MaskedSoftmax { x, mask } => {
                let x = *x;
                let p = &self.nodes[id].value;
                let (m, n) = (p.rows(), p.cols());
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    let prow = p.row(i);
                    let grow = g.row(i);
                    let mrow = mask.row(i);
                    let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if mrow[j] != 0.0 {
                            gx.set(i, j, prow[j] * (grow[j] - dot));
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x].value;
                let gainv = &self.nodes[gain].value;
                let d = xv.cols();
                let df = d as f64;
                let mut gx = Tensor::zeros(xv.rows(), d);
                let mut ggain = Tensor::zeros(1, d);
                let mut gbias = Tensor::zeros(1, d);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let grow = g.row(r);
                    // gradient through the affine part
                    for c in 0..d {
                        ggain.data_mut()[c] += grow[c] * xhat[c];
                        gbias.data_mut()[c] += grow[c];
                    }
                    // gradient through the normalization
                    let gh: Vec<f64> = (0..d).map(|c| grow[c] * gainv.data()[c]).collect();
                    let gh_mean = gh.iter().sum::<f64>() / df;
                    let ghx_mean = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                    for c in 0..d {
                        gx.set(r, c, inv * (gh[c] - gh_mean - xhat[c] * ghx_mean));
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gain, ggain);
                self.accumulate(bias, gbias);
            }
            &Op::Conv1d { x, weight, bias, spec } => {
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[weight].value;
                let (t_len, d_in) = (xv.rows(), xv.cols());
                let d_out = g.cols();
                let k = spec.kernel_size;
                let mut gx = Tensor::zeros(t_len, d_in);
                let mut gw = wv.map(|_| 0.0);
                let mut gb = Tensor::zeros(1, d_out);
                for t in 0..t_len {
                    let grow = g.row(t);
                    for c in 0..d_out {
                        gb.data_mut()[c] += grow[c];
                    }
                    for tap in 0..k {
                        let src = t as isize - spec.left_pad as isize + tap as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        match spec.kind {
                            tensor::ConvKind::ChannelMix => {
                                for ci in 0..d_in {
                                    let xval = xv.at(src, ci);
                                    let wrow_idx = tap * d_in + ci;
                                    let mut acc = 0.0;
                                    for co in 0..d_out {
                                        let wv_ = wv.at(wrow_idx, co);
                                        acc += grow[co] * wv_;
                                        gw.data_mut()[wrow_idx * d_out + co] += xval * grow[co];
                                    }
                                    gx.data_mut()[src * d_in + ci] += acc;
                                }
                            }
                            tensor::ConvKind::Depthwise => {
                                for c in 0..d_in {
                                    let xval = xv.at(src, c);
                                    let wval = wv.at(tap, c);
                                    gx.data_mut()[src * d_in + c] += grow[c] * wval;
                                    gw.data_mut()[tap * d_in + c] += grow[c] * xval;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(weight, gw);
                self.accumulate(bias, gb);
            }
            &Op::L2NormRows(x) => {
                let xv = &self.nodes[x].value;
                let yv = &self.nodes[id].value;
                let d = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), d);
                for r in 0..xv.rows() {
                    let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let grow = g.row(r);
                    if norm > tensor::L2_NORM_FLOOR {
                        let yrow = yv.row(r);
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            gx.set(r, c, (grow[c] - yrow[c] * dot) / norm);
                        }
                    } else {
                        // floor active: y = x / floor, a plain scaling
                        for c in 0..d {
                            gx.set(r, c, grow[c] / tensor::L2_NORM_FLOOR);
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.nodes[a].value.cols();
                let cb = self.nodes[b].value.cols();
                let ga = tensor::col_slice(g, 0, ca);
                let gb = tensor::col_slice(g, ca, cb);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::ColSlice { x, start, len } => {
                let xv = &self.nodes[x].value;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for c in 0..len {
                        gx.set(r, start + c, g.at(r, c));
                    }
                }
                self.accumulate(x, gx);
            }
            Op::GatherRows { srcs, row } => {
                let row = *row;
                for (i, src) in srcs.iter().enumerate() {
                    let sv = &self.nodes[*src].value;
                    let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                    for c in 0..sv.cols() {
                        gs.set(row, c, g.at(i, c));
                    }
                    self.accumulate(*src, gs);
                }
            }
            &Op::RowwiseDot(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let d = av.cols();
                let mut ga = Tensor::zeros(av.rows(), d);
                let mut gb = Tensor::zeros(av.rows(), d);
                for r in 0..av.rows() {
                    let gr = g.at(r, 0);
                    for c in 0..d {
                        ga.set(r, c, gr * bv.at(r, c));
                        gb.set(r, c, gr * av.at(r, c));
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::BceMean { yhat, targets, clamp } => {
                let yhat = *yhat;
                let clamp = *clamp;
                let yv = &self.nodes[yhat].value;
                let t_len = yv.rows() as f64;
                let gs = g.scalar_value();
                let mut gy = Tensor::zeros(yv.rows(), yv.cols());
                for (i, (p, t)) in yv.data().iter().zip(targets.data()).enumerate() {
                    if *p < clamp || *p > 1.0 - clamp {
                        continue; // clamped region, flat
                    }
                    gy.data_mut()[i] = gs * (p - t) / (p * (1.0 - p)) / t_len;
                }
                self.accumulate(yhat, gy);
            }
            Op::SqDiffMean { x, target } => {
                let x = *x;
                let xv = &self.nodes[x].value;
                let n = xv.len() as f64;
                let gs = g.scalar_value();
                let gx = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| gs * 2.0 * (a - b) / n)
                        .collect(),
                );
                self.accumulate(x, gx);
            }
            &Op::SumAll(x) => {
                let gs = g.scalar_value();
                let gx = self.nodes[x].value.map(|_| gs);
                self.accumulate(x, gx);
            }
        }
    }
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` over every coordinate of every parameter.
///
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
/// The 1e-6 floor keeps f64 roundoff in the central difference (about
/// eps * |f| / step) from dominating coordinates whose true gradient is
/// exactly zero, such as attention key biases.
pub fn grad_check<F>(
    f: F,
    params: &Params,
    analytic: &Params,
    step: f64,
) -> Result<f64, NumericsError>
where
    F: Fn(&Params) -> f64,
{
    let base = f(params);
    if !base.is_finite() {
        return Err(NumericsError::NonFinite {
            context: "grad_check loss".to_string(),
        });
    }
    let mut max_rel = 0.0f64;
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).len();
        for i in 0..n {
            let orig = params.get(name).data()[i];
            work.get_mut(name).data_mut()[i] = orig + step;
            let up = f(&work);
            work.get_mut(name).data_mut()[i] = orig - step;
            let down = f(&work);
            work.get_mut(name).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFinite {
                    context: format!("grad_check perturbation of {name}[{i}]"),
                });
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(name).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
