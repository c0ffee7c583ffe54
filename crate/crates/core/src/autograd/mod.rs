//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! With gradients disabled the same ops run but nothing is marked as needing
//! a gradient, so the forward code path is shared between training and
//! inference.

mod kernels;

use std::collections::BTreeMap;

use kernels::ConvGeom;
pub use kernels::ConvOpts;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    BranchSoftmax {
        input: Var,
        branches: usize,
    },
    Resize(Var),
    Sum(Var),
    WeightedBce {
        pred: Var,
        target: Tensor,
        w_pos: f64,
        w_neg: f64,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that tracks gradients of parameter leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph for inference: no node ever requires a gradient.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that requires a gradient (when gradients are enabled).
    pub fn variable(&mut self, value: Tensor) -> Var {
        let g = self.grad_enabled;
        self.push(value, Op::Leaf, g)
    }

    /// Registers every tensor of `store` as a variable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store
            .iter()
            .map(|(name, t)| (name.to_string(), self.variable(t.clone())))
            .collect();
        Bound { vars }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if ws.c != xs.c {
            return Err(Error::Shape(format!(
                "conv2d: input has {} channels, weight expects {}",
                xs.c, ws.c
            )));
        }
        if let Some(b) = bias {
            if self.shape(b).numel() != ws.n {
                return Err(Error::Shape("conv2d: bias length != output channels".into()));
            }
        }
        let (ho, wo) = match (opts.output_len(xs.h, ws.h), opts.output_len(xs.w, ws.w)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: {xs} input too small for {}×{} kernel with {opts:?}",
                    ws.h, ws.w
                )))
            }
        };
        let geom = ConvGeom {
            cin: xs.c,
            h: xs.h,
            w: xs.w,
            kh: ws.h,
            kw: ws.w,
            ho,
            wo,
            opts,
        };
        let value = kernels::conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &geom);
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        if groups == 0 || !s.c.is_multiple_of(groups) {
            return Err(Error::Shape(format!(
                "group_norm: {} channels not divisible into {groups} groups",
                s.c
            )));
        }
        if self.shape(gamma).numel() != s.c || self.shape(beta).numel() != s.c {
            return Err(Error::Shape("group_norm: affine length != channels".into()));
        }
        let (value, means, rstds) =
            kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                input: x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(&[x]);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(&[x]);
        self.push(value, Op::Sigmoid(x), needs)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out =
            kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::Shape(format!("cannot broadcast {sa} with {sb}")))?;
        let mut value = Tensor::zeros(out);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let dst = value.data_mut();
        kernels::for_each_broadcast(out, sa, sb, |o, ia, ib| dst[o] = f(va[ia], vb[ib]));
        Ok(value)
    }

    /// Element-wise sum with size-1 broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Element-wise product with size-1 broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), needs)
    }

    /// Sum of one or more same-shaped (or broadcastable) vars.
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Shape("sum of zero vars".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn concat_channels(&mut self, vars: &[Var]) -> Result<Var> {
        let value = {
            let ts: Vec<&Tensor> = vars.iter().map(|&v| self.value(v)).collect();
            Tensor::concat_channels(&ts)?
        };
        let needs = self.needs(vars);
        Ok(self.push(value, Op::Concat(vars.to_vec()), needs))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow_channels(start, len)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Narrow { input: x, start }, needs))
    }

    /// Spatial mean: `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let t = self.value(x);
        let mut value = Tensor::zeros(s.with_spatial(1, 1));
        for n in 0..s.n {
            for c in 0..s.c {
                let m = t.plane(n, c).iter().sum::<f64>() / s.plane() as f64;
                value.set(n, c, 0, 0, m);
            }
        }
        let needs = self.needs(&[x]);
        self.push(value, Op::GlobalAvgPool(x), needs)
    }

    /// Softmax across `branches` equal channel groups: channel `c` of branch
    /// `k` lives at channel `k * C + c`, and the softmax runs over `k` for
    /// each (sample, c, y, x).
    pub fn branch_softmax(&mut self, x: Var, branches: usize) -> Result<Var> {
        let s = self.shape(x);
        if branches == 0 || !s.c.is_multiple_of(branches) {
            return Err(Error::Shape(format!(
                "branch_softmax: {} channels not divisible by {branches} branches",
                s.c
            )));
        }
        let c = s.c / branches;
        let plane = s.plane();
        let src = self.value(x).data();
        let mut value = Tensor::zeros(s);
        let dst = value.data_mut();
        for n in 0..s.n {
            for ci in 0..c {
                for p in 0..plane {
                    let idx = |k: usize| ((n * s.c) + k * c + ci) * plane + p;
                    let max = (0..branches).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..branches).map(|k| (src[idx(k)] - max).exp()).sum();
                    for k in 0..branches {
                        dst[idx(k)] = (src[idx(k)] - max).exp() / z;
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::BranchSoftmax { input: x, branches }, needs))
    }

    /// Bilinear resampling to `(h, w)`.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        if self.shape(x).h == h && self.shape(x).w == w {
            return x;
        }
        let value = self.value(x).resize_bilinear(h, w);
        let needs = self.needs(&[x]);
        self.push(value, Op::Resize(x), needs)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(value, Op::Sum(x), needs)
    }

    /// Mean over pixels of
    /// `-w_pos·M·log(p) - w_neg·(1-M)·log(1-p)` with `p` clamped by
    /// [`BCE_EPS`]. The weights are constants of the op.
    pub fn weighted_bce(&mut self, pred: Var, target: &Tensor, w_pos: f64, w_neg: f64) -> Result<Var> {
        self.value(pred).expect_shape(target.shape(), "weighted_bce")?;
        let p = self.value(pred).data();
        let total: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&p, &m)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -w_pos * m * p.ln() - w_neg * (1.0 - m) * (1.0 - p).ln()
            })
            .sum();
        let value = Tensor::scalar(total / p.len() as f64);
        let needs = self.needs(&[pred]);
        Ok(self.push(
            value,
            Op::WeightedBce {
                pred,
                target: target.clone(),
                w_pos,
                w_neg,
            },
            needs,
        ))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.value(pred).expect_shape(target.shape(), "mse")?;
        let p = self.value(pred).data();
        let total: f64 = p.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(total / p.len() as f64);
        let needs = self.needs(&[pred]);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != Shape::scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (needs(*input), needs(*weight), bias.is_some_and(needs));
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, geom, need);
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                if let Some(dw) = dw {
                    acc(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    let shape = self.shape(*b);
                    acc(*b, db.reshape(shape).expect("bias numel checked at build"));
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let (dx, dg, db) =
                    kernels::group_norm_backward(self.value(*input), self.value(*gamma), g, *groups, means, rstds);
                acc(*input, dx);
                acc(*gamma, dg.reshape(self.shape(*gamma)).expect("gamma numel"));
                acc(*beta, db.reshape(self.shape(*beta)).expect("beta numel"));
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, g| if v > 0.0 { g } else { 0.0 })
                    .expect("relu grad shape");
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .zip_map(g, |s, g| g * s * (1.0 - s))
                    .expect("sigmoid grad shape");
                acc(*x, d);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(v, kernels::reduce_to(g, self.shape(v)));
                    }
                }
            }
            Op::Mul(a, b) => {
                let out = g.shape();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !needs(v) {
                        continue;
                    }
                    let ov = self.value(other);
                    let mut prod = Tensor::zeros(out);
                    {
                        let dst = prod.data_mut();
                        kernels::for_each_broadcast(out, out, ov.shape(), |o, _, io| {
                            dst[o] = g.data()[o] * ov.data()[io];
                        });
                    }
                    acc(v, kernels::reduce_to(&prod, self.shape(v)));
                }
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::Concat(vars) => {
                let mut start = 0;
                for &v in vars {
                    let c = self.shape(v).c;
                    if needs(v) {
                        acc(v, g.narrow_channels(start, c).expect("concat grad split"));
                    }
                    start += c;
                }
            }
            Op::Narrow { input, start } => {
                let s = self.shape(*input);
                let len = g.shape().c;
                let plane = s.plane();
                let mut d = Tensor::zeros(s);
                for n in 0..s.n {
                    let dst = (n * s.c + start) * plane;
                    let src = n * len * plane;
                    d.data_mut()[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                }
                acc(*input, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let inv = 1.0 / s.plane() as f64;
                let d = Tensor::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) * inv);
                acc(*x, d);
            }
            Op::BranchSoftmax { input, branches } => {
                let s = g.shape();
                let c = s.c / branches;
                let plane = s.plane();
                let p = node.value.data();
                let mut d = Tensor::zeros(s);
                let dst = d.data_mut();
                for n in 0..s.n {
                    for ci in 0..c {
                        for q in 0..plane {
                            let idx = |k: usize| ((n * s.c) + k * c + ci) * plane + q;
                            let dot: f64 = (0..*branches).map(|k| p[idx(k)] * g.data()[idx(k)]).sum();
                            for k in 0..*branches {
                                dst[idx(k)] = p[idx(k)] * (g.data()[idx(k)] - dot);
                            }
                        }
                    }
                }
                acc(*input, d);
            }
            Op::Resize(x) => {
                acc(*x, kernels::resize_bilinear_backward(g, self.shape(*x)));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.data()[0])),
            Op::WeightedBce {
                pred,
                target,
                w_pos,
                w_neg,
            } => {
                let scale = g.data()[0] / target.numel() as f64;
                let d = self
                    .value(*pred)
                    .zip_map(target, |p, m| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            return 0.0;
                        }
                        scale * (-w_pos * m / p + w_neg * (1.0 - m) / (1.0 - p))
                    })
                    .expect("bce grad shape");
                acc(*pred, d);
            }
            Op::Mse { pred, target } => {
                let scale = 2.0 * g.data()[0] / target.numel() as f64;
                let d = self
                    .value(*pred)
                    .zip_map(target, |p, t| scale * (p - t))
                    .expect("mse grad shape");
                acc(*pred, d);
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Parameter leaves of one graph, keyed by parameter name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gathers per-parameter gradients into a store shaped like the params;
    /// parameters the loss does not depend on get zeros.
    pub fn collect_grads(&self, graph: &Graph, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, v) in self.iter() {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
            out.insert(name, g);
        }
        out
    }
}
