//! Tape-based reverse-mode differentiation over channel-major matrices.
//!
//! Values are `C x N` matrices whose columns are frames. `N` is a whole
//! number of sequences of `seq_len` frames each, laid out back to back;
//! temporal convolutions never mix frames of different sequences.
//!
//! A graph is built once per forward pass and supports one backward pass.
//! [`Graph::stop_gradient`] and [`Graph::constant`] produce values that
//! backward flow never crosses.

use std::collections::BTreeMap;

use super::params::{Grads, ParamStore};
use super::{Real, Tensor2D};
use crate::error::{Error, Result};

/// Added to the squared norm in [`Graph::normalize_frames`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization of a squared-error loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over every (channel, weighted frame) element.
    MeanElements,
    /// Sum over channels, mean over weighted frames.
    MeanFrames,
}

enum Op<S> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        dilation: usize,
        // im2col buffer, `(C_in * kernel) x N`; empty when kernel == 1
        cols: Vec<S>,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    MaskFrames {
        input: Var,
        mask: Vec<S>,
    },
    StraightThrough(Var),
    NormalizeFrames {
        input: Var,
        // per-frame 1 / norm
        inv_norm: Vec<S>,
    },
    SquaredError {
        pred: Var,
        target: Tensor2D<S>,
        weights: Vec<S>,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor2D<S>,
        labels: Vec<usize>,
        weights: Vec<S>,
        scale: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Dot {
        input: Var,
        weights: Tensor2D<S>,
    },
}

struct Node<S> {
    value: Tensor2D<S>,
    grad: Option<Tensor2D<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    seq_len: usize,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

impl<S: Real> Graph<S> {
    pub fn new(seq_len: usize) -> Self {
        assert!(seq_len > 0, "sequence length must be positive");
        Self {
            nodes: Vec::new(),
            seq_len,
            params: BTreeMap::new(),
            backward_done: false,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn push(&mut self, value: Tensor2D<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor2D<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor2D<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Value that never receives gradient.
    pub fn constant(&mut self, value: Tensor2D<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that accumulates gradient (used by gradient checks).
    pub fn input(&mut self, value: Tensor2D<S>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf bound to a named parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, true, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Same value, no backward flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn check_frames(&self, t: &Tensor2D<S>, what: &str) -> Result<()> {
        if t.cols() == 0 || t.cols() % self.seq_len != 0 {
            return Err(Error::Shape(format!(
                "{what}: {} frames is not a whole number of {}-frame sequences",
                t.cols(),
                self.seq_len
            )));
        }
        Ok(())
    }

    /// "Same"-padded, stride-1 temporal cross-correlation.
    ///
    /// `weight` is `C_out x (C_in * kernel)` (a `[C_out, C_in, kernel]` array
    /// flattened row-major), `bias` is `C_out x 1`. Padding is
    /// `dilation * (kernel - 1) / 2` on both sides of every sequence.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        self.check_frames(x, "conv1d input")?;
        let c_in = x.rows();
        let c_out = w.rows();
        if c_in == 0 || w.cols() % c_in != 0 {
            return Err(Error::Shape(format!(
                "conv1d weight {}x{} incompatible with {} input channels",
                w.rows(),
                w.cols(),
                c_in
            )));
        }
        let kernel = w.cols() / c_in;
        if kernel % 2 == 0 {
            return Err(Error::Shape(format!("conv1d kernel size {kernel} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::Shape("conv1d dilation must be positive".into()));
        }
        if let Some(b) = bias {
            let b = self.value(b);
            if b.shape() != (c_out, 1) {
                return Err(Error::Shape(format!(
                    "conv1d bias {:?} does not match {c_out} output channels",
                    b.shape()
                )));
            }
        }
        let n = x.cols();
        let cols = if kernel == 1 {
            Vec::new()
        } else {
            im2col(x, kernel, dilation, self.seq_len)
        };
        let mut out = Tensor2D::zeros(c_out, n);
        if let Some(b) = bias {
            let b = self.value(b);
            for r in 0..c_out {
                let bv = b.get(r, 0);
                out.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|o| *o = bv);
            }
        }
        let kk = c_in * kernel;
        let src: &[S] = if kernel == 1 { x.data() } else { &cols };
        S::gemm(
            c_out,
            kk,
            n,
            S::one(),
            w.data(),
            (kk as isize, 1),
            src,
            (n as isize, 1),
            S::one(),
            out.data_mut(),
            (n as isize, 1),
        );
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                dilation,
                cols,
            },
        ))
    }

    /// Pointwise linear map over channels (a kernel-1 convolution).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (c_in, w_cols) = (self.value(input).rows(), self.value(weight).cols());
        if c_in != w_cols {
            return Err(Error::Shape(format!(
                "linear weight expects {w_cols} input channels, got {c_in}"
            )));
        }
        self.conv1d(input, weight, bias, 1)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.needs(x);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Stack `a` above `b` along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Shape(format!(
                "concat frame counts differ: {} vs {}",
                va.cols(),
                vb.cols()
            )));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let value = Tensor2D::from_vec(va.rows() + vb.rows(), va.cols(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Concat(a, b)))
    }

    /// Multiply every channel of frame `n` by `mask[n]`.
    pub fn mask_frames(&mut self, x: Var, mask: &[S]) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.cols() {
            return Err(Error::Shape(format!(
                "mask of length {} for {} frames",
                mask.len(),
                v.cols()
            )));
        }
        let cols = v.cols();
        let mut value = v.clone();
        for (i, o) in value.data_mut().iter_mut().enumerate() {
            *o *= mask[i % cols];
        }
        let rg = self.needs(x);
        Ok(self.push(
            value,
            rg,
            Op::MaskFrames {
                input: x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Scales every frame (column) to unit L2 norm. `NORM_EPSILON` is added
    /// under the square root.
    pub fn normalize_frames(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let mut inv_norm = vec![S::zero(); cols];
        for (c, inv) in inv_norm.iter_mut().enumerate() {
            let sq: f64 = (0..rows).map(|r| v.get(r, c).as_f64().powi(2)).sum();
            *inv = S::from_f64(1.0 / (sq + NORM_EPSILON).sqrt());
        }
        let value = Tensor2D::from_fn(rows, cols, |r, c| v.get(r, c) * inv_norm[c]);
        let rg = self.needs(x);
        self.push(value, rg, Op::NormalizeFrames { input: x, inv_norm })
    }

    /// Forward value is `quantized`; backward passes the gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor2D<S>) -> Result<Var> {
        if self.value(x).shape() != quantized.shape() {
            return Err(Error::Shape(format!(
                "straight-through {:?} vs {:?}",
                self.value(x).shape(),
                quantized.shape()
            )));
        }
        let rg = self.needs(x);
        Ok(self.push(quantized, rg, Op::StraightThrough(x)))
    }

    /// Weighted squared error against a constant target. Frames with weight
    /// zero are excluded from both the sum and the normalization.
    pub fn squared_error(
        &mut self,
        pred: Var,
        target: &Tensor2D<S>,
        frame_weights: &[S],
        reduction: Reduction,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || frame_weights.len() != p.cols() {
            return Err(Error::Shape(format!(
                "squared error prediction {:?}, target {:?}, {} weights",
                p.shape(),
                target.shape(),
                frame_weights.len()
            )));
        }
        let wsum: f64 = frame_weights.iter().map(|w| w.as_f64()).sum();
        let denom = match reduction {
            Reduction::MeanElements => wsum * p.rows() as f64,
            Reduction::MeanFrames => wsum,
        };
        let scale = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        let cols = p.cols();
        let mut total = 0.0f64;
        for r in 0..p.rows() {
            let (pr, tr) = (p.row(r), target.row(r));
            for c in 0..cols {
                let d = (pr[c] - tr[c]).as_f64();
                total += frame_weights[c].as_f64() * d * d;
            }
        }
        let value = Tensor2D::scalar(S::from_f64(total * scale));
        let rg = self.needs(pred);
        Ok(self.push(
            value,
            rg,
            Op::SquaredError {
                pred,
                target: target.clone(),
                weights: frame_weights.to_vec(),
                scale,
            },
        ))
    }

    /// Mean weighted softmax cross-entropy; `logits` is `classes x N`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], frame_weights: &[S]) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.cols() || frame_weights.len() != x.cols() {
            return Err(Error::Shape(format!(
                "cross entropy over {} frames with {} labels and {} weights",
                x.cols(),
                labels.len(),
                frame_weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.rows()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                x.rows()
            )));
        }
        let probs = softmax_columns(x);
        let wsum: f64 = frame_weights.iter().map(|w| w.as_f64()).sum();
        let scale = if wsum > 0.0 { 1.0 / wsum } else { 0.0 };
        let mut total = 0.0f64;
        for (c, &l) in labels.iter().enumerate() {
            let w = frame_weights[c].as_f64();
            if w == 0.0 {
                continue;
            }
            let col: Vec<f64> = (0..x.rows()).map(|r| x.get(r, c).as_f64()).collect();
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += w * (lse - col[l]);
        }
        let value = Tensor2D::scalar(S::from_f64(total * scale));
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                weights: frame_weights.to_vec(),
                scale,
            },
        ))
    }

    /// `sum_i coeff_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != (1, 1) {
                return Err(Error::Shape("weighted_sum terms must be scalars".into()));
            }
            total += c * t.item().as_f64();
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor2D::scalar(S::from_f64(total)),
            rg,
            Op::WeightedSum(terms.to_vec()),
        ))
    }

    /// `sum(weights ⊙ x)`: reduces any value to a scalar with a fixed projection.
    pub fn dot(&mut self, x: Var, weights: Tensor2D<S>) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != weights.shape() {
            return Err(Error::Shape("dot operands differ in shape".into()));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor2D::scalar(S::from_f64(total)), rg, Op::Dot { input: x, weights }))
    }

    /// Reverse pass from a scalar. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument("backward already ran on this graph".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        self.backward_done = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor2D::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor2D<S>) -> Vec<(Var, Tensor2D<S>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                dilation,
                cols,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (c_in, c_out, n) = (x.rows(), w.rows(), x.cols());
                let kk = c_in * kernel;
                let src: &[S] = if *kernel == 1 { x.data() } else { cols };
                if self.needs(*weight) {
                    let mut dw = Tensor2D::zeros(c_out, kk);
                    // dW = g * cols^T
                    S::gemm(
                        c_out,
                        n,
                        kk,
                        S::one(),
                        g.data(),
                        (n as isize, 1),
                        src,
                        (1, n as isize),
                        S::zero(),
                        dw.data_mut(),
                        (kk as isize, 1),
                    );
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let db = Tensor2D::from_fn(c_out, 1, |r, _| g.row(r).iter().fold(S::zero(), |acc, &v| acc + v));
                        out.push((*b, db));
                    }
                }
                if self.needs(*input) {
                    // dcols = W^T * g
                    let mut dcols = vec![S::zero(); kk * n];
                    S::gemm(
                        kk,
                        c_out,
                        n,
                        S::one(),
                        w.data(),
                        (1, kk as isize),
                        g.data(),
                        (n as isize, 1),
                        S::zero(),
                        &mut dcols,
                        (n as isize, 1),
                    );
                    let dx = if *kernel == 1 {
                        Tensor2D::from_vec(c_in, n, dcols).expect("shape")
                    } else {
                        col2im(&dcols, c_in, n, *kernel, *dilation, self.seq_len)
                    };
                    out.push((*input, dx));
                }
            }
            Op::Relu(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    if yv <= S::zero() {
                        *d = S::zero();
                    }
                }
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Concat(a, b) => {
                let ra = self.value(*a).rows();
                let cols = g.cols();
                let (top, bottom) = g.data().split_at(ra * cols);
                if self.needs(*a) {
                    out.push((*a, Tensor2D::from_vec(ra, cols, top.to_vec()).expect("shape")));
                }
                if self.needs(*b) {
                    let rb = g.rows() - ra;
                    out.push((*b, Tensor2D::from_vec(rb, cols, bottom.to_vec()).expect("shape")));
                }
            }
            Op::MaskFrames { input, mask } => {
                let cols = g.cols();
                let mut dx = g.clone();
                for (k, d) in dx.data_mut().iter_mut().enumerate() {
                    *d *= mask[k % cols];
                }
                out.push((*input, dx));
            }
            Op::StraightThrough(x) => out.push((*x, g.clone())),
            Op::NormalizeFrames { input, inv_norm } => {
                // dx = (g - y (y . g)) / norm
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut dx = Tensor2D::zeros(rows, cols);
                for c in 0..cols {
                    let yg: f64 = (0..rows).map(|r| (y.get(r, c) * g.get(r, c)).as_f64()).sum();
                    for r in 0..rows {
                        let v = (g.get(r, c).as_f64() - y.get(r, c).as_f64() * yg) * inv_norm[c].as_f64();
                        dx.set(r, c, S::from_f64(v));
                    }
                }
                out.push((*input, dx));
            }
            Op::SquaredError {
                pred,
                target,
                weights,
                scale,
            } => {
                let p = self.value(*pred);
                let cols = p.cols();
                let coeff = 2.0 * scale * g.item().as_f64();
                let mut dp = Tensor2D::zeros(p.rows(), cols);
                for (k, d) in dp.data_mut().iter_mut().enumerate() {
                    let c = k % cols;
                    let diff = (p.data()[k] - target.data()[k]).as_f64();
                    *d = S::from_f64(coeff * weights[c].as_f64() * diff);
                }
                out.push((*pred, dp));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                weights,
                scale,
            } => {
                let coeff = scale * g.item().as_f64();
                let cols = probs.cols();
                let mut dx = Tensor2D::zeros(probs.rows(), cols);
                for r in 0..probs.rows() {
                    for c in 0..cols {
                        let onehot = if labels[c] == r { 1.0 } else { 0.0 };
                        let v = coeff * weights[c].as_f64() * (probs.get(r, c).as_f64() - onehot);
                        dx.set(r, c, S::from_f64(v));
                    }
                }
                out.push((*logits, dx));
            }
            Op::WeightedSum(terms) => {
                let gv = g.item().as_f64();
                for &(v, c) in terms {
                    out.push((v, Tensor2D::scalar(S::from_f64(c * gv))));
                }
            }
            Op::Dot { input, weights } => {
                let gv = g.item();
                out.push((*input, weights.map(|w| w * gv)));
            }
        }
        out
    }

    /// Gradients of every bound parameter that received one, keyed by name.
    pub fn param_grads(&self) -> Grads<S> {
        let mut grads = Grads::new();
        for (name, &v) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                grads.insert(name.clone(), g.clone());
            }
        }
        grads
    }
}

fn im2col<S: Real>(x: &Tensor2D<S>, kernel: usize, dilation: usize, seq_len: usize) -> Vec<S> {
    let (c_in, n) = x.shape();
    let half = (kernel - 1) / 2;
    let mut cols = vec![S::zero(); c_in * kernel * n];
    for ci in 0..c_in {
        let xr = x.row(ci);
        for j in 0..kernel {
            let offset = (j as isize - half as isize) * dilation as isize;
            let dst = &mut cols[(ci * kernel + j) * n..(ci * kernel + j + 1) * n];
            for (s, chunk) in dst.chunks_mut(seq_len).enumerate() {
                let base = s * seq_len;
                for (t, d) in chunk.iter_mut().enumerate() {
                    let src = t as isize + offset;
                    if src >= 0 && (src as usize) < seq_len {
                        *d = xr[base + src as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Real>(dcols: &[S], c_in: usize, n: usize, kernel: usize, dilation: usize, seq_len: usize) -> Tensor2D<S> {
    let half = (kernel - 1) / 2;
    let mut dx = Tensor2D::zeros(c_in, n);
    for ci in 0..c_in {
        for j in 0..kernel {
            let offset = (j as isize - half as isize) * dilation as isize;
            let src = &dcols[(ci * kernel + j) * n..(ci * kernel + j + 1) * n];
            let row = &mut dx.data_mut()[ci * n..(ci + 1) * n];
            for s in 0..n / seq_len {
                let base = s * seq_len;
                for t in 0..seq_len {
                    let tgt = t as isize + offset;
                    if tgt >= 0 && (tgt as usize) < seq_len {
                        row[base + tgt as usize] += src[base + t];
                    }
                }
            }
        }
    }
    dx
}

/// Column-wise softmax.
pub fn softmax_columns<S: Real>(x: &Tensor2D<S>) -> Tensor2D<S> {
    let (rows, cols) = x.shape();
    let mut out = Tensor2D::zeros(rows, cols);
    for c in 0..cols {
        let max = (0..rows)
            .map(|r| x.get(r, c).as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..rows).map(|r| (x.get(r, c).as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (r, e) in exps.into_iter().enumerate() {
            out.set(r, c, S::from_f64(e / z));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn conv(
        x: &Tensor2D<f64>,
        w: &Tensor2D<f64>,
        b: Option<&Tensor2D<f64>>,
        dilation: usize,
        seq_len: usize,
    ) -> Tensor2D<f64> {
        let mut g = Graph::new(seq_len);
        let x = g.constant(x.clone());
        let w = g.constant(w.clone());
        let b = b.map(|b| g.constant(b.clone()));
        let y = g.conv1d(x, w, b, dilation).unwrap();
        g.value(y).clone()
    }

    // out[o, t] = b[o] + sum_{i, j} w[o, i, j] * x[i, t + (j - k/2) * dilation]
    fn naive_conv(
        x: &Tensor2D<f64>,
        w: &Tensor2D<f64>,
        b: &Tensor2D<f64>,
        kernel: usize,
        dilation: usize,
    ) -> Tensor2D<f64> {
        let (c_in, t) = x.shape();
        let half = (kernel / 2) as isize;
        Tensor2D::from_fn(w.rows(), t, |o, tt| {
            let mut acc = b.get(o, 0);
            for i in 0..c_in {
                for j in 0..kernel {
                    let src = tt as isize + (j as isize - half) * dilation as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += w.get(o, i * kernel + j) * x.get(i, src as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel() {
        let x = random(3, 7, 1);
        let w = Tensor2D::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        assert_eq!(conv(&x, &w, Some(&Tensor2D::zeros(3, 1)), 1, 7), x);
    }

    #[test]
    fn matches_nested_loops() {
        let (x, w, b) = (random(2, 5, 2), random(3, 2 * 3, 3), random(3, 1, 4));
        let got = conv(&x, &w, Some(&b), 1, 5);
        let want = naive_conv(&x, &w, &b, 3, 1);
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() <= 1e-12);
        }
        for dilation in [3, 9] {
            let x = random(2, 30, 5);
            let got = conv(&x, &w, Some(&b), dilation, 30);
            let want = naive_conv(&x, &w, &b, 3, dilation);
            assert!(got.frobenius_distance(&want) < 1e-12);
        }
    }

    #[test]
    fn dilation_nine_keeps_length() {
        let y = conv(&random(4, 120, 6), &random(4, 4 * 3, 7), None, 9, 120);
        assert_eq!(y.shape(), (4, 120));
    }

    #[test]
    fn sequences_do_not_leak_into_each_other() {
        let (x, w, b) = (random(2, 20, 8), random(2, 2 * 3, 9), random(2, 1, 10));
        let both = conv(&x, &w, Some(&b), 3, 10);
        let first = Tensor2D::from_fn(2, 10, |r, c| x.get(r, c));
        let alone = conv(&first, &w, Some(&b), 3, 10);
        for r in 0..2 {
            assert_eq!(&both.row(r)[..10], alone.row(r));
        }
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::<f64>::new(4);
        let x = g.constant(random(2, 4, 1));
        let even = g.constant(random(1, 4, 2));
        assert!(matches!(g.conv1d(x, even, None, 1), Err(Error::Shape(_))));
        let w = g.constant(random(1, 5, 3));
        assert!(matches!(g.conv1d(x, w, None, 1), Err(Error::Shape(_))));
        let w = g.constant(random(1, 6, 3));
        assert!(matches!(g.conv1d(x, w, None, 0), Err(Error::Shape(_))));
        let x5 = g.constant(random(2, 5, 1));
        assert!(g.conv1d(x5, w, None, 1).is_err());
    }

    #[test]
    fn normalized_frames_have_unit_length() {
        let mut g = Graph::new(6);
        let x = g.constant(random(4, 6, 11));
        let y = g.normalize_frames(x);
        for c in 0..6 {
            let n: f64 = g.value(y).column(c).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::new(4);
        let x = g.input(random(2, 4, 12));
        let q = random(2, 4, 13);
        let z = g.straight_through(x, q.clone()).unwrap();
        assert_eq!(g.value(z), &q);
        let up = random(2, 4, 14);
        let l = g.dot(z, up.clone()).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &up);
    }

    proptest! {
        #[test]
        fn conv_is_linear_in_its_input(
            c_in in 1usize..5, c_out in 1usize..5, t in 4usize..24, k in prop::sample::select(vec![1usize, 3, 9]),
            dilation in 1usize..4, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in any::<u64>(),
        ) {
            let (x, y, w) = (random(c_in, t, seed), random(c_in, t, seed ^ 1), random(c_out, c_in * k, seed ^ 2));
            let mix = Tensor2D::from_fn(c_in, t, |r, c| alpha * x.get(r, c) + beta * y.get(r, c));
            let lhs = conv(&mix, &w, None, dilation, t);
            let (cx, cy) = (conv(&x, &w, None, dilation, t), conv(&y, &w, None, dilation, t));
            for i in 0..lhs.len() {
                let rhs = alpha * cx.data()[i] + beta * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
            }
        }

        #[test]
        fn conv_gradients_over_random_shapes(
            c_in in 1usize..=8, c_out in 1usize..=4, t in 4usize..=32,
            k in prop::sample::select(vec![1usize, 3, 9]), dilation in 1usize..4, seed in any::<u64>(),
        ) {
            let (x, w, b) = (random(c_in, t, seed), random(c_out, c_in * k, seed ^ 3), random(c_out, 1, seed ^ 4));
            let r = crate::diff::grad_check(&[x, w, b], t, 1e-5, |g, v| g.conv1d(v[0], v[1], Some(v[2]), dilation)).unwrap();
            prop_assert!(r.max_rel_error < 1e-5, "{:?}", r);
        }
    }
}
