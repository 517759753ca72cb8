//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the vector-Jacobian product. Nodes are appended in execution
//! order, so walking the node list backwards is a valid reverse topological
//! order. A tape is consumed by [`Tape::backward`]; a second call is rejected.

use crate::error::{Error, Result};

use super::array::NdArray;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Softmax(Var),
    Glu(Var, Var),
    Reshape(Var),
    Matmul(Var, Var),
    ConcatChannels(Var, Var),
    TileTime(Var),
    Conv1d(ConvGeometry),
    Deconv1d(ConvGeometry),
    BatchNorm(BatchNormSaved),
}

#[derive(Debug)]
pub(crate) struct ConvGeometry {
    pub input: Var,
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub(crate) struct BatchNormSaved {
    pub input: Var,
    pub gamma: Var,
    pub beta: Var,
    pub normalized: NdArray,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
}

struct Node {
    value: NdArray,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> NdArray {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => NdArray::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_opt(&self, var: Var) -> Option<&NdArray> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &NdArray {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: NdArray) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: NdArray, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: NdArray, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, |v| v + offset, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(NdArray::scalar(total), rg, Op::Sum(x))
    }

    /// Softmax over the last axis (rank 1 or 2).
    pub fn softmax(&mut self, u: Var) -> Result<Var> {
        let input = self.value(u);
        let width = *input
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax of a scalar"))?;
        if width == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let mut out = input.clone();
        for row in out.data_mut().chunks_mut(width) {
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[u]);
        Ok(self.push(out, rg, Op::Softmax(u)))
    }

    /// Gated linear unit `a ⊙ sigmoid(b)`.
    pub fn glu(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, g| x * sigmoid(g), Op::Glu(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = NdArray::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    /// Concatenate `[B, Ca, N]` and `[B, Cb, N]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3
            || bv.rank() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[2]
        {
            return Err(Error::dim(format!(
                "cannot concatenate channels of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (batch, ca, cb, n) = (av.shape()[0], av.shape()[1], bv.shape()[1], av.shape()[2]);
        let mut out = Vec::with_capacity(batch * (ca + cb) * n);
        for i in 0..batch {
            out.extend_from_slice(&av.data()[i * ca * n..(i + 1) * ca * n]);
            out.extend_from_slice(&bv.data()[i * cb * n..(i + 1) * cb * n]);
        }
        let value = NdArray::new(vec![batch, ca + cb, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::ConcatChannels(a, b)))
    }

    /// Repeat a `[B, C]` array `frames` times along a new trailing time axis.
    pub fn tile_time(&mut self, x: Var, frames: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim(format!("tile_time expects [B, C], got {:?}", xv.shape())));
        }
        let (batch, channels) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(batch * channels * frames);
        for &v in xv.data() {
            out.extend(std::iter::repeat(v).take(frames));
        }
        let value = NdArray::new(vec![batch, channels, frames], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::TileTime(x)))
    }

    /// Reverse pass from a scalar loss. The tape can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::full(&shapes[loss.0], 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        // Only leaves that ask for gradients keep them; interior buffers are dropped.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    pub(super) fn accumulate(&self, grads: &mut [Option<NdArray>], target: Var, contribution: NdArray) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &NdArray, grads: &mut [Option<NdArray>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |u, y| u * y)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |u, x| u * x)?);
                }
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.zip_map(&node.value, |u, y| u * y)?);
            }
            Op::Log(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |u, v| u / v)?);
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.zip_map(&node.value, |u, s| u * s * (1.0 - s))?);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let gx = g.zip_map(self.value(*x), |u, v| if v < lo || v > hi { 0.0 } else { u })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let u = g.item();
                self.accumulate(grads, *x, NdArray::full(self.value(*x).shape(), u));
            }
            Op::Softmax(u) => {
                let width = *node.value.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for (row_g, row_s) in gx.data_mut().chunks_mut(width).zip(node.value.data().chunks(width)) {
                    let inner: f64 = row_g.iter().zip(row_s).map(|(a, b)| a * b).sum();
                    for (gv, &s) in row_g.iter_mut().zip(row_s) {
                        *gv = s * (*gv - inner);
                    }
                }
                self.accumulate(grads, *u, gx);
            }
            Op::Glu(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |u, y| u * sigmoid(y))?);
                }
                if self.requires_grad(*b) {
                    let mut gb = g.clone();
                    for ((gv, &x), &y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        let s = sigmoid(y);
                        *gv *= x * s * (1.0 - s);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = G Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let row_b = &bv.data()[p * n..(p + 1) * n];
                            let row_g = &g.data()[i * n..(i + 1) * n];
                            ga[i * k + p] = row_b.iter().zip(row_g).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, NdArray::new(vec![m, k], ga)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let row_g = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(row_g) {
                                *dst += a_ip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, NdArray::new(vec![k, n], gb)?);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (batch, ca, cb, n) = (sa[0], sa[1], sb[1], sa[2]);
                let mut ga = Vec::with_capacity(batch * ca * n);
                let mut gb = Vec::with_capacity(batch * cb * n);
                let stride = (ca + cb) * n;
                for i in 0..batch {
                    let block = &g.data()[i * stride..(i + 1) * stride];
                    ga.extend_from_slice(&block[..ca * n]);
                    gb.extend_from_slice(&block[ca * n..]);
                }
                self.accumulate(grads, *a, NdArray::new(sa, ga)?);
                self.accumulate(grads, *b, NdArray::new(sb, gb)?);
            }
            Op::TileTime(x) => {
                let shape = self.value(*x).shape().to_vec();
                let frames = node.value.shape()[2];
                let gx: Vec<f64> = g.data().chunks(frames).map(|c| c.iter().sum()).collect();
                self.accumulate(grads, *x, NdArray::new(shape, gx)?);
            }
            Op::Conv1d(geo) => self.conv1d_backward(geo, g, grads)?,
            Op::Deconv1d(geo) => self.deconv1d_backward(geo, g, grads)?,
            Op::BatchNorm(saved) => self.batchnorm_backward(saved, g, grads)?,
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let mut out = u.to_vec();
    softmax_in_place(&mut out);
    out
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (dst, &bv) in row_out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += a_ip * bv;
            }
        }
    }
}
