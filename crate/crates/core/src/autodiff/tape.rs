//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the
//! node vector is already a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom, ConvPlan, PoolKind, PoolPlan};
use super::params::{ParamId, ParamStore};
use super::tensor::{Shape, Tensor};

pub const BN_EPS: f32 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Pool { x: Var, kind: PoolKind, plan: PoolPlan, arg: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Relu { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Gap { x: Var },
    AddN { parts: Vec<Var> },
    Mul { a: Var, b: Var },
    ScaleBy { x: Var, s: Var, idx: usize },
    Scale { x: Var, k: f32 },
    Softmax { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    macs: u64,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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

    /// Multiply-accumulate operations performed by convolutions and linear
    /// layers recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that does not participate in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Reads a parameter. Repeated reads of the same id share one node, so
    /// gradients of shared parameters accumulate across all uses.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let plan = ConvPlan::new(self.shape(x), self.shape(w), geom)?;
        let out = kernels::conv2d_forward(self.value(x), self.value(w), &plan);
        self.macs += (plan.out.numel() * plan.w.c * plan.w.h * plan.w.w) as u64;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, rg))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let plan = PoolPlan::new(self.shape(x), k, stride, padding)?;
        let (out, arg) = kernels::pool2d_forward(self.value(x), &plan, kind);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Pool { x, kind, plan, arg }, rg))
    }

    /// Batch normalization using the batch's own statistics. Returns the
    /// output together with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let s = self.shape(x);
        if s.n * s.plane() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("training mode needs at least two values per channel, input {s}"),
            ));
        }
        let (mean, var) = kernels::channel_moments(self.value(x));
        let out = self.bn_apply(x, gamma, beta, &mean, &var, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f32], var: &[f32]) -> Result<Var> {
        self.bn_apply(x, gamma, beta, mean, var, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f32], var: &[f32], train: bool) -> Result<Var> {
        let s = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != s.c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has {} entries for {} channels", self.value(v).len(), s.c),
                ));
            }
        }
        if mean.len() != s.c || var.len() != s.c {
            return Err(Error::shape("batch_norm", "statistics length"));
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let plane = s.plane();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0f32; s.numel()];
        let mut out = Tensor::zeros(s);
        let od = out.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    od[i] = gd[c] * h + bd[c];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Fully connected layer on the flattened `(c, h, w)` features of each
    /// batch item. `w` has shape `(out, in, 1, 1)`, `b` shape `(1, out, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let fin = xs.item();
        if ws.c * ws.h * ws.w != fin {
            return Err(Error::shape(
                "linear",
                format!("weight {ws} against input {xs}"),
            ));
        }
        let fout = ws.n;
        if let Some(b) = b {
            if self.value(b).len() != fout {
                return Err(Error::shape("linear", "bias length"));
            }
        }
        let mut out = Tensor::zeros(Shape::new(xs.n, fout, 1, 1));
        // out (n × fout) = x (n × fin) · wᵀ
        kernels::gemm_nt(xs.n, fin, fout, self.value(x).data(), self.value(w).data(), out.data_mut());
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fout) {
                for (o, bv) in row.iter_mut().zip(&bd) {
                    *o += bv;
                }
            }
        }
        self.macs += (xs.n * fin * fout) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() == 0 {
            return Err(Error::shape("global_avg_pool", format!("input {s}")));
        }
        let plane = s.plane();
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gap { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("add", "no operands"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            if self.shape(p) != out.shape() {
                return Err(Error::shape(
                    "add",
                    format!("{} vs {}", self.shape(p), out.shape()),
                ));
            }
            out.add_assign(self.value(p));
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::AddN { parts: parts.to_vec() }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{} vs {}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Multiplies `x` by the scalar element `idx` of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let k = *self
            .value(s)
            .data()
            .get(idx)
            .ok_or_else(|| Error::shape("scale_by", format!("index {idx} out of range")))?;
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleBy { x, s, idx }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale { x, k }, rg)
    }

    /// Softmax over all elements of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), softmax(t.data())).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum { x }, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if labels.len() != s.n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch {}", labels.len(), s.n),
            ));
        }
        let classes = s.item();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(s.numel());
        let mut loss = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            loss += lse - row[label] as f64;
            probs.extend(row.iter().map(|&v| (v as f64 - lse).exp() as f32));
        }
        let loss = (loss / s.n as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.len()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, g, &mut grads)?;
        }

        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, geom } => {
                let plan = ConvPlan::new(self.shape(*x), self.shape(*w), *geom)?;
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    &plan,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::Pool { x, kind, plan, arg } => {
                accumulate(grads, *x, kernels::pool2d_backward(&g, plan, *kind, arg));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let m = (s.n * plane) as f32;
                let gd = g.data();
                let mut dgamma = vec![0.0f32; s.c];
                let mut dbeta = vec![0.0f32; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * plane;
                        for i in base..base + plane {
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(s);
                    let dd = dx.data_mut();
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            let k = gam[c] * inv_std[c];
                            for i in base..base + plane {
                                dd[i] = if *train {
                                    k * (gd[i] - dbeta[c] / m - xhat[i] * dgamma[c] / m)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dgamma)?);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), dbeta)?);
                }
            }
            Op::Relu { x } => {
                let mut dx = g;
                for (d, &o) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (fin, fout) = (xs.item(), ws.n);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    // dx (n × fin) = g (n × fout) · w (fout × fin)
                    kernels::gemm_nn(xs.n, fout, fin, g.data(), self.value(*w).data(), dx.data_mut());
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(ws);
                    // dw (fout × fin) = gᵀ (fout × n) · x (n × fin)
                    kernels::gemm_tn(fout, xs.n, fin, g.data(), self.value(*x).data(), dw.data_mut());
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = Tensor::zeros(self.shape(*b));
                        for row in g.data().chunks(fout) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.wants(p) {
                        accumulate(grads, p, g.slice_channels(start, c)?);
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let gs = g.shape();
                let plane = xs.plane();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * plane;
                    let src = n * gs.c * plane;
                    dx.data_mut()[dst..dst + gs.c * plane]
                        .copy_from_slice(&g.data()[src..src + gs.c * plane]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Gap { x } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let mut dx = Tensor::zeros(xs);
                for (chunk, &gv) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                    chunk.iter_mut().for_each(|v| *v = gv / plane as f32);
                }
                accumulate(grads, *x, dx);
            }
            Op::AddN { parts } => {
                for &p in parts {
                    if self.wants(p) {
                        accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let mut da = g.clone();
                    for (d, v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= v;
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = g;
                    for (d, v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= v;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::ScaleBy { x, s, idx } => {
                if self.wants(*s) {
                    let dot: f32 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    let mut ds = Tensor::zeros(self.shape(*s));
                    ds.data_mut()[*idx] = dot;
                    accumulate(grads, *s, ds);
                }
                if self.wants(*x) {
                    let k = self.value(*s).data()[*idx];
                    let mut dx = g;
                    dx.data_mut().iter_mut().for_each(|v| *v *= k);
                    accumulate(grads, *x, dx);
                }
            }
            Op::Scale { x, k } => {
                let mut dx = g;
                dx.data_mut().iter_mut().for_each(|v| *v *= k);
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let dot: f32 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                let data = g.data().iter().zip(y).map(|(gv, yv)| yv * (gv - dot)).collect();
                accumulate(grads, *x, Tensor::from_vec(node.value.shape(), data)?);
            }
            Op::Sum { x } => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.item()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.shape(*logits);
                let classes = s.item();
                let scale = g.item() / s.n as f32;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, Tensor::from_vec(s, d)?);
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f32]) -> Vec<f32> {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
