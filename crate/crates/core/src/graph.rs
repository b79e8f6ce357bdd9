//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node;
//! [`Gradients::accumulate_into`] then adds the parameter-leaf gradients into
//! a [`ParamStore`].

use crate::compensated::{Acc, Dd};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    SoftmaxGroups {
        x: Var,
        groups: usize,
    },
    GlobalAvgPool(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Scale(Var, f64),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    AddN(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        ignore_index: i64,
        count: usize,
    },
    L1 {
        pred: Var,
        target: Tensor,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    WeightedBce {
        logits: Var,
        target: Tensor,
        w_pos: f64,
    },
    NormalL1 {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Rounding residual of scalar reductions; the exact value is `value + lo`.
    lo: f64,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    weight_grad_fault: Option<f64>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `total / count`, or 0 when nothing was counted.
fn mean(total: Acc, count: usize) -> Dd {
    if count == 0 {
        Dd::default()
    } else {
        total.total().div_f64(count as f64)
    }
}

/// `ln(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn same_shape(what: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{what}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales every convolution weight gradient by `factor`
    /// during backward, producing a deliberately wrong derivative.
    pub fn with_weight_grad_fault(factor: f64) -> Self {
        Self {
            nodes: Vec::new(),
            weight_grad_fault: Some(factor),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, lo: 0.0, op });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, v: Dd, op: Op) -> Var {
        self.nodes.push(Node {
            value: Tensor::scalar(v.hi),
            lo: v.lo,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn precise(&self, v: Var) -> Dd {
        let n = &self.nodes[v.0];
        Dd::new(n.value.data()[0], n.lo)
    }

    /// A scalar node's value as `(hi, lo)`, where `hi` is the rounded value
    /// and `hi + lo` tracks the reduction without intermediate rounding.
    pub fn value_precise(&self, v: Var) -> Result<(f64, f64)> {
        let n = &self.nodes[v.0];
        if n.value.numel() != 1 {
            return Err(Error::contract(format!("value_precise: {} is not a scalar", n.value.shape())));
        }
        Ok((n.value.data()[0], n.lo))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// 2-D convolution. `w` is `[out_c, in_c, kh, kw]`, `b` is `[1, out_c, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.c != xs.c {
            return Err(Error::contract(format!(
                "conv2d: input {xs} has {} channels but weight {ws} expects {}",
                xs.c, ws.c
            )));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::contract(format!(
                "conv2d: bias {bs} does not match weight {ws}"
            )));
        }
        if ws.h % 2 == 0 || ws.w % 2 == 0 || stride == 0 {
            return Err(Error::contract(format!(
                "conv2d: kernel {}x{} must be odd and stride {stride} positive",
                ws.h, ws.w
            )));
        }
        let geom = ConvGeom::new(xs, ws, stride, pad).ok_or_else(|| {
            Error::contract(format!("conv2d: kernel {ws} larger than padded input {xs}"))
        })?;
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(w), self.value(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Bilinear upsampling with half-pixel centers (align-corners off).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::contract("upsample: factor must be at least 1"));
        }
        if factor == 1 {
            let out = self.value(x).clone();
            return Ok(self.push(out, Op::Upsample { x, factor }));
        }
        let out = kernels::upsample_forward(self.value(x), factor);
        Ok(self.push(out, Op::Upsample { x, factor }))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::contract("concat: no inputs"))?);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::contract(format!("concat: {s} incompatible with {first}")));
            }
            c += s.c;
        }
        let out_shape = first.with_channels(c);
        let p = first.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape().c * p;
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        Ok(self.push(out, Op::SliceChannels { x, start }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        if self.value(a).numel() == 1 {
            let v = self.precise(a).add(self.precise(b));
            return Ok(self.push_scalar(v, Op::Add(a, b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies each channel plane of `x` by the matching `[n, c, 1, 1]` gate.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(gate));
        if gs != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(Error::contract(format!("scale_channels: gate {gs} for input {xs}")));
        }
        let mut out = self.value(x).clone();
        let g = self.value(gate).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_exact_mut(xs.plane()).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= g[i]);
        }
        Ok(self.push(out, Op::ScaleChannels { x, gate }))
    }

    /// Softmax across `groups` equal channel chunks: at every
    /// (batch, residual channel, y, x) the values of channel `k * C + c`
    /// for `k in 0..groups` are normalized to sum to one.
    pub fn softmax_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        if groups == 0 || !s.c.is_multiple_of(groups) {
            return Err(Error::contract(format!(
                "softmax_groups: {} channels not divisible into {groups} groups",
                s.c
            )));
        }
        let cg = s.c / groups;
        let p = s.plane();
        let xv = self.value(x);
        let mut out = Tensor::zeros(s);
        let mut buf = vec![0.0; groups];
        for n in 0..s.n {
            for c in 0..cg {
                for i in 0..p {
                    let idx = |k: usize| ((n * s.c + k * cg + c) * p) + i;
                    let mut m = f64::NEG_INFINITY;
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b = xv.data()[idx(k)];
                        m = m.max(*b);
                    }
                    let mut z = 0.0;
                    for b in buf.iter_mut() {
                        *b = (*b - m).exp();
                        z += *b;
                    }
                    for (k, b) in buf.iter().enumerate() {
                        out.data_mut()[idx(k)] = b / z;
                    }
                }
            }
        }
        Ok(self.push(out, Op::SoftmaxGroups { x, groups }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let xv = self.value(x);
        let data = (0..s.n * s.c)
            .map(|i| xv.data()[i * s.plane()..(i + 1) * s.plane()].iter().sum::<f64>() / s.plane() as f64)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape");
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// Group normalization with per-channel affine `gamma`, `beta` of shape `[1, c, 1, 1]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        if groups == 0 || !s.c.is_multiple_of(groups) {
            return Err(Error::contract(format!(
                "group_norm: {} channels not divisible into {groups} groups",
                s.c
            )));
        }
        let affine = Shape::new(1, s.c, 1, 1);
        same_shape("group_norm gamma", self.shape(gamma), affine)?;
        same_shape("group_norm beta", self.shape(beta), affine)?;
        let per = s.c / groups * s.plane();
        let xv = self.value(x);
        let mut xhat = Tensor::zeros(s);
        let mut rstd = Vec::with_capacity(s.n * groups);
        for (src, dst) in xv.data().chunks_exact(per).zip(xhat.data_mut().chunks_exact_mut(per)) {
            let mean = src.iter().sum::<f64>() / per as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * r;
            }
            rstd.push(r);
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(s.plane()).enumerate() {
            let c = i % s.c;
            chunk.iter_mut().for_each(|v| *v = gm[c] * *v + bt[c]);
        }
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        if self.value(x).numel() == 1 {
            let v = self.precise(x).mul_f64(k);
            return self.push_scalar(v, Op::Scale(x, k));
        }
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = Acc::default();
        self.value(x).data().iter().for_each(|&v| acc.add(v));
        self.push_scalar(acc.total(), Op::Sum(x))
    }

    /// `sum(x * weights)` for a constant weight tensor, as a scalar node.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        same_shape("weighted_sum", self.shape(x), weights.shape())?;
        let mut acc = Acc::default();
        for (&a, &b) in self.value(x).data().iter().zip(weights.data()) {
            let p = a * b;
            acc.add(p);
            acc.add(a.mul_add(b, -p));
        }
        Ok(self.push_scalar(acc.total(), Op::WeightedSum { x, weights }))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("add_n: no inputs"))?;
        if self.value(first).numel() == 1 {
            let mut v = self.precise(first);
            for &x in &xs[1..] {
                same_shape("add_n", self.shape(x), self.shape(first))?;
                v = v.add(self.precise(x));
            }
            return Ok(self.push_scalar(v, Op::AddN(xs.to_vec())));
        }
        let mut out = self.value(first).clone();
        for &v in &xs[1..] {
            same_shape("add_n", self.shape(v), out.shape())?;
            out.add_assign(self.value(v));
        }
        Ok(self.push(out, Op::AddN(xs.to_vec())))
    }

    /// Mean cross-entropy over non-ignored pixels. `labels` is laid out
    /// `[n, h, w]`. Returns 0 when every pixel is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore_index: i64) -> Result<Var> {
        let s = self.shape(logits);
        if labels.len() != s.n * s.plane() {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for logits {s}",
                labels.len()
            )));
        }
        let lv = self.value(logits);
        let p = s.plane();
        let mut total = Acc::default();
        let mut count = 0;
        for (i, &t) in labels.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= s.c {
                return Err(Error::Invalid(format!(
                    "label {t} outside [0, {}) at pixel {i}",
                    s.c
                )));
            }
            let (n, px) = (i / p, i % p);
            let at = |c: usize| lv.data()[(n * s.c + c) * p + px];
            let m = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..s.c).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
            total.add(lse);
            total.add(-at(t as usize));
            count += 1;
        }
        let loss = mean(total, count);
        Ok(self.push_scalar(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore_index,
                count,
            },
        ))
    }

    /// Mean absolute error over elements where `mask` is true (all when `None`).
    pub fn l1(&mut self, pred: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        same_shape("l1", self.shape(pred), target.shape())?;
        if let Some(m) = mask {
            if m.len() != target.numel() {
                return Err(Error::contract("l1: mask length does not match target"));
            }
        }
        let pv = self.value(pred);
        let mut total = Acc::default();
        let mut count = 0;
        for (i, (a, b)) in pv.data().iter().zip(target.data()).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                total.add((a - b).abs());
                count += 1;
            }
        }
        let loss = mean(total, count);
        Ok(self.push_scalar(
            loss,
            Op::L1 {
                pred,
                target: target.clone(),
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
        ))
    }

    /// Mean of `-[w y log p + (1 - w)(1 - y) log(1 - p)]` with `p = sigmoid(logit)`.
    pub fn weighted_bce(&mut self, logits: Var, target: &Tensor, w_pos: f64) -> Result<Var> {
        same_shape("weighted_bce", self.shape(logits), target.shape())?;
        if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("binary target holds {v}")));
        }
        let lv = self.value(logits);
        let mut total = Acc::default();
        for (&z, &y) in lv.data().iter().zip(target.data()) {
            total.add(w_pos * y * softplus(-z) + (1.0 - w_pos) * (1.0 - y) * softplus(z));
        }
        let loss = mean(total, lv.numel());
        Ok(self.push_scalar(
            loss,
            Op::WeightedBce {
                logits,
                target: target.clone(),
                w_pos,
            },
        ))
    }

    /// Mean elementwise L1 between L2-normalized `[n, 3, h, w]` predictions
    /// and unit targets. Vectors shorter than 1e-8 are compared unnormalized.
    pub fn normal_l1(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let s = self.shape(pred);
        same_shape("normal_l1", s, target.shape())?;
        if s.c != 3 {
            return Err(Error::contract(format!("normal_l1: expected 3 channels, got {s}")));
        }
        let pv = self.value(pred);
        let mut total = Acc::default();
        for_each_vector(s, |idx| {
            let v = idx.map(|i| pv.data()[i]);
            let u = normalize_guarded(v).0;
            for k in 0..3 {
                total.add((u[k] - target.data()[idx[k]]).abs());
            }
        });
        let loss = mean(total, s.numel());
        Ok(self.push_scalar(
            loss,
            Op::NormalL1 {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Hash of every branch taken by the recorded forward pass: the sign of
    /// each relu input, of each absolute-difference residual, and the guard
    /// of each normal normalization. Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = BitHash(0xcbf2_9ce4_8422_2325);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        h.push(*v > 0.0);
                    }
                }
                Op::L1 { pred, target, mask, .. } => {
                    let pv = self.value(*pred);
                    for (i, (a, b)) in pv.data().iter().zip(target.data()).enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            h.push(a > b);
                        }
                    }
                }
                Op::NormalL1 { pred, target } => {
                    let pv = self.value(*pred);
                    for_each_vector(pv.shape(), |idx| {
                        let (u, len) = normalize_guarded(idx.map(|i| pv.data()[i]));
                        h.push(len.is_some());
                        for k in 0..3 {
                            h.push(u[k] > target.data()[idx[k]]);
                        }
                    });
                }
                _ => {}
            }
        }
        h.0
    }

    /// Gradients of scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: root {} is not a scalar",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward from `root` and adds parameter gradients into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(root)?;
        g.accumulate_into(self, store);
        Ok(g)
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                let mut db = Tensor::zeros(self.shape(*b));
                kernels::conv2d_backward(geom, xv, wv, g, Some(&mut dx), &mut dw, &mut db);
                if let Some(f) = self.weight_grad_fault {
                    dw.data_mut().iter_mut().for_each(|v| *v *= f);
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Upsample { x, factor } => {
                let dx = if *factor == 1 {
                    g.clone()
                } else {
                    kernels::upsample_backward(g, self.shape(*x), *factor)
                };
                acc(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &v in xs {
                    let c = self.shape(v).c;
                    acc(grads, v, g.slice_channels(start, c).expect("concat slice"));
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let gs = g.shape();
                let mut dx = Tensor::zeros(xs);
                let p = xs.plane();
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * p;
                    let src = n * gs.c * p;
                    dx.data_mut()[dst..dst + gs.c * p].copy_from_slice(&g.data()[src..src + gs.c * p]);
                }
                acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = node.value.clone();
                for (d, gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d = gv * *d * (1.0 - *d);
                }
                acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (d, v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *d *= v;
                }
                let mut db = g.clone();
                for (d, v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= v;
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ScaleChannels { x, gate } => {
                let xv = self.value(*x);
                let gate_v = self.value(*gate);
                let p = xv.shape().plane();
                let mut dx = g.clone();
                let mut dgate = Tensor::zeros(gate_v.shape());
                for (k, (dchunk, xchunk)) in dx
                    .data_mut()
                    .chunks_exact_mut(p)
                    .zip(xv.data().chunks_exact(p))
                    .enumerate()
                {
                    let gk = gate_v.data()[k];
                    let mut s = 0.0;
                    for (d, xv) in dchunk.iter_mut().zip(xchunk) {
                        s += *d * xv;
                        *d *= gk;
                    }
                    dgate.data_mut()[k] = s;
                }
                acc(grads, *x, dx);
                acc(grads, *gate, dgate);
            }
            Op::SoftmaxGroups { x, groups } => {
                let y = &node.value;
                let s = y.shape();
                let cg = s.c / groups;
                let p = s.plane();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..cg {
                        for i in 0..p {
                            let idx = |k: usize| ((n * s.c + k * cg + c) * p) + i;
                            let dot: f64 = (0..*groups).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                            for k in 0..*groups {
                                dx.data_mut()[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let p = s.plane();
                let mut dx = Tensor::zeros(s);
                for (k, chunk) in dx.data_mut().chunks_exact_mut(p).enumerate() {
                    chunk.fill(g.data()[k] / p as f64);
                }
                acc(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = xhat.shape();
                let p = s.plane();
                let cpg = s.c / groups;
                let per = cpg * p;
                let gm = self.value(*gamma).data();
                let mut dgamma = Tensor::zeros(self.shape(*gamma));
                let mut dbeta = Tensor::zeros(self.shape(*beta));
                let mut dx = Tensor::zeros(s);
                for (gi, &r) in rstd.iter().enumerate() {
                    let base = gi * per;
                    let first_c = (gi % groups) * cpg;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..per {
                        let c = first_c + j / p;
                        let gy = g.data()[base + j];
                        let xh = xhat.data()[base + j];
                        dgamma.data_mut()[c] += gy * xh;
                        dbeta.data_mut()[c] += gy;
                        let d = gy * gm[c];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    let m = per as f64;
                    for j in 0..per {
                        let c = first_c + j / p;
                        let d = g.data()[base + j] * gm[c];
                        let xh = xhat.data()[base + j];
                        dx.data_mut()[base + j] = r / m * (m * d - sum_d - xh * sum_dx);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Scale(x, k) => acc(grads, *x, g.map(|v| v * k)),
            Op::Sum(x) => acc(grads, *x, Tensor::full(self.shape(*x), g.item())),
            Op::WeightedSum { x, weights } => acc(grads, *x, weights.map(|w| w * g.item())),
            Op::AddN(xs) => {
                for &v in xs {
                    acc(grads, v, g.clone());
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore_index,
                count,
            } => {
                let lv = self.value(*logits);
                let s = lv.shape();
                let mut dx = Tensor::zeros(s);
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    let p = s.plane();
                    for (i, &t) in labels.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        let (n, px) = (i / p, i % p);
                        let idx = |c: usize| (n * s.c + c) * p + px;
                        let m = (0..s.c).map(|c| lv.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..s.c).map(|c| (lv.data()[idx(c)] - m).exp()).sum();
                        for c in 0..s.c {
                            let prob = (lv.data()[idx(c)] - m).exp() / z;
                            let onehot = if c == t as usize { 1.0 } else { 0.0 };
                            dx.data_mut()[idx(c)] = scale * (prob - onehot);
                        }
                    }
                }
                acc(grads, *logits, dx);
            }
            Op::L1 {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = self.value(*pred);
                let mut dx = Tensor::zeros(pv.shape());
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            let diff = pv.data()[i] - target.data()[i];
                            *d = if diff > 0.0 {
                                scale
                            } else if diff < 0.0 {
                                -scale
                            } else {
                                0.0
                            };
                        }
                    }
                }
                acc(grads, *pred, dx);
            }
            Op::WeightedBce { logits, target, w_pos } => {
                let lv = self.value(*logits);
                let scale = g.item() / lv.numel() as f64;
                let mut dx = Tensor::zeros(lv.shape());
                for ((d, &z), &y) in dx.data_mut().iter_mut().zip(lv.data()).zip(target.data()) {
                    let p = sigmoid(z);
                    *d = scale * (w_pos * y * (p - 1.0) + (1.0 - w_pos) * (1.0 - y) * p);
                }
                acc(grads, *logits, dx);
            }
            Op::NormalL1 { pred, target } => {
                let pv = self.value(*pred);
                let s = pv.shape();
                let scale = g.item() / s.numel() as f64;
                let mut dx = Tensor::zeros(s);
                for_each_vector(s, |idx| {
                    let v = idx.map(|i| pv.data()[i]);
                    let (u, norm) = normalize_guarded(v);
                    let gu: [f64; 3] = std::array::from_fn(|k| {
                        let diff = u[k] - target.data()[idx[k]];
                        scale * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 }
                    });
                    let gv = match norm {
                        Some(len) => {
                            let dot = u[0] * gu[0] + u[1] * gu[1] + u[2] * gu[2];
                            std::array::from_fn(|k| (gu[k] - u[k] * dot) / len)
                        }
                        None => gu,
                    };
                    for k in 0..3 {
                        dx.data_mut()[idx[k]] = gv[k];
                    }
                });
                acc(grads, *pred, dx);
            }
        }
    }
}

/// Calls `f` with the flat indices of the three components of every pixel vector.
fn for_each_vector(s: Shape, mut f: impl FnMut([usize; 3])) {
    let p = s.plane();
    for n in 0..s.n {
        for i in 0..p {
            f(std::array::from_fn(|k| (n * 3 + k) * p + i));
        }
    }
}

/// Folds branch bits into an FNV-1a style hash.
#[derive(Clone, Copy)]
struct BitHash(u64);

impl BitHash {
    fn push(&mut self, bit: bool) {
        self.0 = (self.0 ^ u64::from(bit)).wrapping_mul(0x0000_0100_0000_01b3);
    }
}

/// Returns the unit vector and the original length, or the vector itself and
/// `None` when its length is below 1e-8.
pub(crate) fn normalize_guarded(v: [f64; 3]) -> ([f64; 3], Option<f64>) {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if len < 1e-8 {
        (v, None)
    } else {
        (v.map(|c| c / len), Some(len))
    }
}

/// Per-node gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for (i, node) in graph.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Direct nested-loop convolution used as an independent oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
        let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
        for n in 0..xs.n {
            for o in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for i in 0..xs.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += w.at(o, i, ky, kx) * x.at(n, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let idx = out.index(n, o, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: Shape, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let w = g.input(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let b = g.input(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_all_ones_3x3_padded() {
        let mut g = Graph::new();
        let xt = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let wt = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let bt = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let expected = conv_oracle(&xt, &wt, &bt, 1, 1);
        assert_eq!(expected.data(), &[4.0; 4]);
        let (x, w, b) = (g.input(xt), g.input(wt), g.input(bt));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), expected.data());
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let mut g = Graph::new();
        let x = g.input(pseudo(Shape::new(2, 3, 5, 5), 1));
        let w = g.input(Tensor::zeros(Shape::new(2, 3, 3, 3)));
        let b = g.input(t(Shape::new(1, 2, 1, 1), &[0.25, -1.5]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), Shape::new(2, 2, 3, 3));
        for n in 0..2 {
            assert!(out.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(out.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (1, 0, 3)] {
            let xt = pseudo(Shape::new(2, 3, 7, 6), 11);
            let wt = pseudo(Shape::new(4, 3, k, k), 12);
            let bt = pseudo(Shape::new(1, 4, 1, 1), 13);
            let expected = conv_oracle(&xt, &wt, &bt, stride, pad);
            let mut g = Graph::new();
            let (x, w, b) = (g.input(xt), g.input(wt), g.input(bt));
            let y = g.conv2d(x, w, b, stride, pad).unwrap();
            assert_eq!(g.shape(y), expected.shape());
            for (a, e) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let xa = pseudo(Shape::new(1, 2, 6, 6), 1);
        let xb = pseudo(Shape::new(1, 2, 6, 6), 2);
        let wt = pseudo(Shape::new(3, 2, 3, 3), 3);
        let bt = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let (ka, kb) = (0.7, -2.3);
        let mut g = Graph::new();
        let mix = g.input(Tensor::from_vec(
            xa.shape(),
            xa.data().iter().zip(xb.data()).map(|(a, b)| ka * a + kb * b).collect(),
        ).unwrap());
        let (a, bb) = (g.input(xa), g.input(xb));
        let (w, b) = (g.input(wt), g.input(bt));
        let ym = g.conv2d(mix, w, b, 1, 1).unwrap();
        let ya = g.conv2d(a, w, b, 1, 1).unwrap();
        let yb = g.conv2d(bb, w, b, 1, 1).unwrap();
        for i in 0..g.value(ym).numel() {
            let lin = ka * g.value(ya).data()[i] + kb * g.value(yb).data()[i];
            assert!((g.value(ym).data()[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = g.input(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let b = g.input(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut g = Graph::new();
        let src = pseudo(Shape::new(1, 2, 3, 3), 4);
        let x = g.input(src.clone());
        let y = g.upsample(x, 1).unwrap();
        assert_eq!(g.value(y), &src);
        let c = g.input(Tensor::full(Shape::new(1, 1, 3, 5), 0.1));
        for f in [2, 3, 4, 8] {
            let y = g.upsample(c, f).unwrap();
            assert_eq!(g.shape(y), Shape::new(1, 1, 3 * f, 5 * f));
            assert!(g.value(y).data().iter().all(|&v| v == 0.1));
        }
        assert!(g.upsample(c, 0).is_err());
    }

    /// Scalar bilinear interpolation at half-pixel centres.
    fn bilinear_oracle(img: &[[f64; 2]; 2], factor: usize) -> Vec<f64> {
        let n = 2;
        let sample = |oy: usize, ox: usize| {
            let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            img[y0][x0] * (1.0 - fy) * (1.0 - fx)
                + img[y0][x1] * (1.0 - fy) * fx
                + img[y1][x0] * fy * (1.0 - fx)
                + img[y1][x1] * fy * fx
        };
        (0..n * factor)
            .flat_map(|oy| (0..n * factor).map(move |ox| (oy, ox)))
            .map(|(oy, ox)| sample(oy, ox))
            .collect()
    }

    #[test]
    fn upsample_2x2_matches_scalar_oracle() {
        let expected = bilinear_oracle(&[[0.0, 1.0], [2.0, 3.0]], 2);
        // Frozen from the oracle: rows are 0, .25, .75, 1 offset by 0, .5, 1.5, 2.
        let frozen = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (e, f) in expected.iter().zip(frozen) {
            assert!((e - f).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let x = g.input(t(Shape::new(1, 1, 2, 2), &[0.0, 1.0, 2.0, 3.0]));
        let y = g.upsample(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &frozen);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = pseudo(Shape::new(2, 2, 3, 3), 5);
        let b = pseudo(Shape::new(2, 3, 3, 3), 6);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.concat(&[va, vb]).unwrap();
        assert_eq!(g.shape(c).c, 5);
        let sa = g.slice_channels(c, 0, 2).unwrap();
        let sb = g.slice_channels(c, 2, 3).unwrap();
        assert_eq!(g.value(sa), &a);
        assert_eq!(g.value(sb), &b);
        let single = g.concat(&[va]).unwrap();
        assert_eq!(g.value(single), &a);
        let bad = g.input(Tensor::zeros(Shape::new(2, 1, 4, 3)));
        assert!(g.concat(&[va, bad]).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = g.input(t(Shape::new(1, 1, 1, 3), &[0.0, -3.0, 3.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let ones = g.input(Tensor::full(Shape::new(1, 1, 1, 3), 1.0));
        let m = g.mul(x, ones).unwrap();
        assert_eq!(g.value(m), g.value(x));
        let other = g.input(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        assert!(g.add(x, other).is_err());
        assert!(g.mul(x, other).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(Shape::new(1, 1, 1, 3), &[0.0, -1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_group_examples() {
        let mut g = Graph::new();
        let eq = g.input(Tensor::full(Shape::new(1, 6, 2, 2), 0.3));
        let s = g.softmax_groups(eq, 3).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let x = g.input(t(Shape::new(1, 2, 1, 1), &[0.0, 3f64.ln()]));
        let s = g.softmax_groups(x, 2).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let base = pseudo(Shape::new(2, 6, 3, 3), 8);
        let shifted = base.map(|v| v + 123.0);
        let (a, b) = (g.input(base), g.input(shifted));
        let sa = g.softmax_groups(a, 3).unwrap();
        let sb = g.softmax_groups(b, 3).unwrap();
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let bad = g.input(Tensor::zeros(Shape::new(1, 5, 1, 1)));
        assert!(g.softmax_groups(bad, 3).is_err());
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.input(t(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 5.0, 7.0]));
        let p = g.global_avg_pool(x);
        assert_eq!(g.value(p).data(), &[4.0]);
        let c = g.input(Tensor::full(Shape::new(2, 3, 4, 4), 2.5));
        let p = g.global_avg_pool(c);
        assert!(g.value(p).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn loss_closed_forms() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(Shape::new(1, 4, 2, 2)));
        let ce = g.cross_entropy(logits, &[0, 1, 2, 3], 255).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        let ign = g.cross_entropy(logits, &[255; 4], 255).unwrap();
        assert_eq!(g.value(ign).item(), 0.0);
        let grads = g.backward(ign).unwrap();
        assert!(grads.get(logits).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(g.cross_entropy(logits, &[0, 1, 4, 0], 255), Err(Error::Invalid(_))));

        let z = g.input(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let pos = g.weighted_bce(z, &Tensor::scalar(1.0), 0.95).unwrap();
        assert!((g.value(pos).item() - 0.95 * 2f64.ln()).abs() < 1e-12);
        let neg = g.weighted_bce(z, &Tensor::scalar(0.0), 0.95).unwrap();
        assert!((g.value(neg).item() - 0.05 * 2f64.ln()).abs() < 1e-12);
    }
}
