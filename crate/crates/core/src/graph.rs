//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output value, and records what its backward rule needs. Since
//! inputs always exist before the node that consumes them, the node order is
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep.
//!
//! The graph also keeps an [`OpCounter`]. It tallies the arithmetic that the
//! cost model accounts for: convolutions, matrix products and fully-connected
//! layers (one multiply and one add per multiply-accumulate, bias folded in),
//! global average pooling (one divide per channel, one add per element),
//! channel broadcasts, elementwise add/mul and kernel mixing. Normalization,
//! pointwise nonlinearities and loss reductions are not tallied.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub multiplies: u64,
    pub adds: u64,
}

impl OpCounter {
    pub fn since(self, earlier: OpCounter) -> OpCounter {
        OpCounter { multiplies: self.multiplies - earlier.multiplies, adds: self.adds - earlier.adds }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, k: usize, geom: ConvGeom },
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Sum { x: usize },
    WeightedSum { x: usize, weights: Tensor },
    Relu { x: usize },
    Relu6 { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize, temperature: f64 },
    GlobalAvgPool { x: usize },
    ScaleChannels { t: usize, a: usize },
    ShiftChannels { t: usize, s: usize },
    ChannelGain { a: usize, lambda: usize },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    MaskMul { x: usize, mask: Tensor },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    SelectSample { x: usize, index: usize },
    KernelMixture { weights: usize, row: usize, experts: Vec<usize> },
    ConcatBatch { parts: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by [`Graph::backward`], kept for leaf nodes.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` when `var` is not a leaf or
    /// the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable leaves.
    pub fn get_or_zeros(&self, graph: &Graph, var: Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(var).shape()))
    }
}

/// The computation record: nodes, op tally, and parameter bindings.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    scopes: Vec<Rc<str>>,
    scope: Rc<str>,
    counter: OpCounter,
    consumed: bool,
    param_nodes: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scopes: Vec::new(),
            scope: Rc::from(""),
            counter: OpCounter::default(),
            consumed: false,
            param_nodes: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Label attached to the nodes created from now on. Used to name the
    /// offending layer when a value turns non-finite.
    pub fn set_scope(&mut self, name: &str) -> Rc<str> {
        std::mem::replace(&mut self.scope, Rc::from(name))
    }

    pub fn restore_scope(&mut self, previous: Rc<str>) {
        self.scope = previous;
    }

    /// Scope label of the node `var` was recorded under.
    pub fn scope_of(&self, var: Var) -> &str {
        &self.scopes[var.0]
    }

    /// A constant leaf. Gradients are still reported for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value)
    }

    /// Leaf for a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.param_nodes.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    /// Makes `param(store, id)` resolve to an existing node, letting a caller
    /// substitute a parameter with a value of its own (finite-difference
    /// probing does this).
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        if self.param_lookup.insert(id, var).is_none() {
            self.param_nodes.push((id, var));
        } else if let Some(slot) = self.param_nodes.iter_mut().find(|(p, _)| *p == id) {
            slot.1 = var;
        }
    }

    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_nodes.iter().copied()
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        self.scopes.push(self.scope.clone());
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        if self.consumed {
            return Err(Error::Lifecycle("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name, scope: self.scope.to_string() });
        }
        Ok(self.push_unchecked(op, value))
    }

    fn count(&mut self, multiplies: u64, adds: u64) {
        self.counter.multiplies += multiplies;
        self.counter.adds += adds;
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- ops -------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.val(x).shape(), self.val(kernel).shape(), stride, padding, groups)?;
        let y = kernels::conv2d_forward(&geom, self.val(x).data(), self.val(kernel).data());
        self.count(geom.macs(), geom.macs());
        let value = Tensor::from_parts(geom.output_shape(), y);
        self.push("conv2d", Op::Conv2d { x: x.0, k: kernel.0, geom }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.val(a).matrix("matmul")?;
        let [k2, n] = self.val(b).matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let c = kernels::matmul(self.val(a).data(), self.val(b).data(), m, k, n);
        let macs = (m * n * k) as u64;
        self.count(macs, macs);
        self.push("matmul", Op::MatMul { a: a.0, b: b.0 }, Tensor::from_parts(vec![m, n], c))
    }

    /// `x[N, c_in] · w[c_in, c_out] + b[c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, c_in] = self.val(x).matrix("linear")?;
        let [c_in2, c_out] = self.val(w).matrix("linear")?;
        if c_in != c_in2 {
            return Err(Error::dim("linear", format!("input width {c_in} vs weight rows {c_in2}")));
        }
        if self.val(b).shape() != [c_out] {
            return Err(Error::dim("linear", format!("bias shape {:?}, expected [{c_out}]", self.val(b).shape())));
        }
        let mut y = kernels::matmul(self.val(x).data(), self.val(w).data(), n, c_in, c_out);
        let bias = self.val(b).data();
        for row in y.chunks_mut(c_out) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let macs = (n * c_in * c_out) as u64;
        self.count(macs, macs);
        self.push("linear", Op::Linear { x: x.0, w: w.0, b: b.0 }, Tensor::from_parts(vec![n, c_out], y))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.count(0, value.numel() as u64);
        self.push("add", Op::Add { a: a.0, b: b.0 }, value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.count(value.numel() as u64, 0);
        self.push("mul", Op::Mul { a: a.0, b: b.0 }, value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.val(x).map(|v| v * factor);
        self.count(value.numel() as u64, 0);
        self.push("scale", Op::Scale { x: x.0, factor }, value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.val(x).sum());
        self.push("sum", Op::Sum { x: x.0 }, value)
    }

    /// `Σ weights ⊙ x` as a scalar; `weights` is a constant.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if weights.shape() != self.val(x).shape() {
            return Err(Error::dim(
                "weighted_sum",
                format!("weights {:?} vs input {:?}", weights.shape(), self.val(x).shape()),
            ));
        }
        let s = self.val(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push("weighted_sum", Op::WeightedSum { x: x.0, weights }, Tensor::scalar(s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x).map(|v| v.max(0.0));
        self.push("relu", Op::Relu { x: x.0 }, value)
    }

    /// `min(max(x, 0), 6)`.
    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x).map(|v| v.clamp(0.0, 6.0));
        self.push("relu6", Op::Relu6 { x: x.0 }, value)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x).map(f64::tanh);
        self.push("tanh", Op::Tanh { x: x.0 }, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x).map(sigmoid);
        self.push("sigmoid", Op::Sigmoid { x: x.0 }, value)
    }

    /// Softmax over the channel axis (axis 1) of `[N, C]` or NCHW input,
    /// with logits divided by `temperature` first.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("softmax temperature must be positive, got {temperature}")));
        }
        let t = self.val(x);
        let (n, c, hw) = t.nc_hw("softmax")?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let max = (0..c).map(|ch| src[idx(ch)] / temperature).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[idx(ch)] / temperature - max).exp();
                    out[idx(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[idx(ch)] /= z;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", Op::Softmax { x: x.0, temperature }, value)
    }

    /// Spatial mean per channel: NCHW → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.val(x).nchw("global_avg_pool")?;
        let hw = h * w;
        let data: Vec<f64> = self.val(x).data().chunks(hw).map(|plane| kernels::sum(plane) / hw as f64).collect();
        self.count((n * c) as u64, (n * c * hw) as u64);
        self.push("global_avg_pool", Op::GlobalAvgPool { x: x.0 }, Tensor::from_parts(vec![n, c], data))
    }

    fn channel_pair(&self, op: &'static str, t: Var, a: Var) -> Result<(usize, usize, usize)> {
        let (n, c, hw) = self.val(t).nc_hw(op)?;
        if self.val(a).shape() != [n, c] {
            return Err(Error::dim(
                op,
                format!("per-channel operand {:?} does not match [{n}, {c}]", self.val(a).shape()),
            ));
        }
        Ok((n, c, hw))
    }

    /// `y[n,c,..] = a[n,c] · t[n,c,..]`.
    pub fn scale_channels(&mut self, t: Var, a: Var) -> Result<Var> {
        let (n, c, hw) = self.channel_pair("scale_channels", t, a)?;
        let av = self.val(a).data();
        let mut data = self.val(t).data().to_vec();
        for (plane, s) in data.chunks_mut(hw).zip(av) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        self.count((n * c * hw) as u64, 0);
        let value = Tensor::from_parts(self.val(t).shape().to_vec(), data);
        self.push("scale_channels", Op::ScaleChannels { t: t.0, a: a.0 }, value)
    }

    /// `y[n,c,..] = t[n,c,..] + s[n,c]`.
    pub fn shift_channels(&mut self, t: Var, s: Var) -> Result<Var> {
        let (n, c, hw) = self.channel_pair("shift_channels", t, s)?;
        let sv = self.val(s).data();
        let mut data = self.val(t).data().to_vec();
        for (plane, s) in data.chunks_mut(hw).zip(sv) {
            plane.iter_mut().for_each(|v| *v += s);
        }
        self.count(0, (n * c * hw) as u64);
        let value = Tensor::from_parts(self.val(t).shape().to_vec(), data);
        self.push("shift_channels", Op::ShiftChannels { t: t.0, s: s.0 }, value)
    }

    /// `y[n,c] = a[n,c] · lambda[c]`.
    pub fn channel_gain(&mut self, a: Var, lambda: Var) -> Result<Var> {
        let [n, c] = self.val(a).matrix("channel_gain")?;
        if self.val(lambda).shape() != [c] {
            return Err(Error::dim(
                "channel_gain",
                format!("gain {:?} does not match {c} channels", self.val(lambda).shape()),
            ));
        }
        let lv = self.val(lambda).data();
        let data = self.val(a).data().chunks(c).flat_map(|row| row.iter().zip(lv).map(|(x, l)| x * l)).collect();
        self.count((n * c) as u64, 0);
        self.push("channel_gain", Op::ChannelGain { a: a.0, lambda: lambda.0 }, Tensor::from_parts(vec![n, c], data))
    }

    fn affine_params(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, hw) = self.val(x).nc_hw(op)?;
        if self.val(gamma).shape() != [c] || self.val(beta).shape() != [c] {
            return Err(Error::dim(op, format!("scale/shift must be [{c}]")));
        }
        Ok((n, c, hw))
    }

    /// Batch normalization with batch statistics. Returns the output node
    /// plus the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, hw) = self.affine_params("batch_norm", x, gamma, beta)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::Statistics(format!(
                "batch norm in train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let src = self.val(x).data();
        let (gv, bv) = (self.val(gamma).data(), self.val(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += kernels::sum(&src[(b * c + ch) * hw..][..hw]);
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for b in 0..n {
            for ch in 0..c {
                var[ch] += kernels::centered_square_sum(&src[(b * c + ch) * hw..][..hw], mean[ch]);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut y = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (mu, is, g, bias) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for ((h, o), v) in xhat[off..off + hw].iter_mut().zip(&mut y[off..off + hw]).zip(&src[off..off + hw]) {
                    *h = (v - mu) * is;
                    *o = g * *h + bias;
                }
            }
        }
        let value = Tensor::from_parts(self.val(x).shape().to_vec(), y);
        let out =
            self.push("batch_norm", Op::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }, value)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.affine_params("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", format!("running statistics must have {c} entries")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.val(x).data();
        let (gv, bv) = (self.val(gamma).data(), self.val(beta).data());
        let mut y = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    y[i] = gv[ch] * (src[i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::from_parts(self.val(x).shape().to_vec(), y);
        self.push(
            "batch_norm",
            Op::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, mean: mean.to_vec(), inv_std },
            value,
        )
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if mask.shape() != self.val(x).shape() {
            return Err(Error::dim("mask_mul", "mask shape differs from input"));
        }
        let data = self.val(x).data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(mask.shape().to_vec(), data);
        self.push("dropout", Op::MaskMul { x: x.0, mask }, value)
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.val(logits).matrix("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let src = self.val(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &src[b * k..][..k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[b * k..][..k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push("cross_entropy", Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs }, value)
    }

    /// Sample `index` of a batch, keeping a leading extent of 1.
    pub fn select_sample(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.val(x).shape();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::dim("select_sample", format!("sample {index} of {shape:?}")));
        }
        let per = shape[1..].iter().product::<usize>();
        let mut out_shape = shape.to_vec();
        out_shape[0] = 1;
        let data = self.val(x).data()[index * per..][..per].to_vec();
        self.push("select_sample", Op::SelectSample { x: x.0, index }, Tensor::from_parts(out_shape, data))
    }

    /// `Σ_i weights[row, i] · experts[i]`.
    pub fn kernel_mixture(&mut self, weights: Var, row: usize, experts: &[Var]) -> Result<Var> {
        let [n, e] = self.val(weights).matrix("kernel_mixture")?;
        if experts.is_empty() || experts.len() != e || row >= n {
            return Err(Error::dim(
                "kernel_mixture",
                format!("weights [{n}, {e}] with {} experts, row {row}", experts.len()),
            ));
        }
        let shape = self.val(experts[0]).shape().to_vec();
        if experts.iter().any(|&x| self.val(x).shape() != shape.as_slice()) {
            return Err(Error::dim("kernel_mixture", "experts differ in shape"));
        }
        let coeffs = &self.val(weights).data()[row * e..][..e];
        let mut mixed = vec![0.0; shape.iter().product()];
        for (&ex, &c) in experts.iter().zip(coeffs) {
            for (m, v) in mixed.iter_mut().zip(self.val(ex).data()) {
                *m += c * v;
            }
        }
        let len = mixed.len() as u64;
        self.count(e as u64 * len, (e as u64 - 1) * len);
        let experts = experts.iter().map(|v| v.0).collect();
        self.push(
            "kernel_mixture",
            Op::KernelMixture { weights: weights.0, row, experts },
            Tensor::from_parts(shape, mixed),
        )
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_batch", "nothing to concatenate"));
        };
        let tail = self.val(first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.val(p).shape();
            if s[1..] != tail[..] {
                return Err(Error::dim("concat_batch", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.val(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let parts = parts.iter().map(|v| v.0).collect();
        self.push("concat_batch", Op::ConcatBatch { parts }, Tensor::from_parts(shape, data))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Propagates `d loss / d node` from the scalar `loss` back to every
    /// leaf it depends on. The record is consumed: no further ops or
    /// backward passes are accepted.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Lifecycle("backward already ran on this graph".into()));
        }
        if self.val(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.val(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { x, k, geom } => {
                let (gx, gk) = kernels::conv2d_backward(geom, val(*x).data(), val(*k).data(), gd);
                acc(grads, *x, val(*x), gx);
                acc(grads, *k, val(*k), gk);
            }
            Op::MatMul { a, b } => {
                let [m, k] = shape2(val(*a));
                let n = val(*b).shape()[1];
                acc(grads, *a, val(*a), kernels::matmul_nt(gd, val(*b).data(), m, k, n));
                acc(grads, *b, val(*b), kernels::matmul_tn(val(*a).data(), gd, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let [m, k] = shape2(val(*x));
                let n = val(*w).shape()[1];
                acc(grads, *x, val(*x), kernels::matmul_nt(gd, val(*w).data(), m, k, n));
                acc(grads, *w, val(*w), kernels::matmul_tn(val(*x).data(), gd, m, k, n));
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(grads, *b, val(*b), gb);
            }
            Op::Add { a, b } => {
                acc(grads, *a, val(*a), gd.to_vec());
                acc(grads, *b, val(*b), gd.to_vec());
            }
            Op::Mul { a, b } => {
                let ga = gd.iter().zip(val(*b).data()).map(|(g, v)| g * v).collect();
                let gb = gd.iter().zip(val(*a).data()).map(|(g, v)| g * v).collect();
                acc(grads, *a, val(*a), ga);
                acc(grads, *b, val(*b), gb);
            }
            Op::Scale { x, factor } => {
                acc(grads, *x, val(*x), gd.iter().map(|g| g * factor).collect());
            }
            Op::Sum { x } => {
                acc(grads, *x, val(*x), vec![gd[0]; val(*x).numel()]);
            }
            Op::WeightedSum { x, weights } => {
                acc(grads, *x, val(*x), weights.data().iter().map(|w| w * gd[0]).collect());
            }
            Op::Relu { x } => {
                let gx = zip_map(gd, val(*x).data(), |g, v| if v > 0.0 { g } else { 0.0 });
                acc(grads, *x, val(*x), gx);
            }
            Op::Relu6 { x } => {
                let gx = zip_map(gd, val(*x).data(), |g, v| if v > 0.0 && v < 6.0 { g } else { 0.0 });
                acc(grads, *x, val(*x), gx);
            }
            Op::Tanh { x } => {
                let gx = zip_map(gd, node.value.data(), |g, y| g * (1.0 - y * y));
                acc(grads, *x, val(*x), gx);
            }
            Op::Sigmoid { x } => {
                let gx = zip_map(gd, node.value.data(), |g, y| g * y * (1.0 - y));
                acc(grads, *x, val(*x), gx);
            }
            Op::Softmax { x, temperature } => {
                let x = *x;
                let y = &node.value;
                let (n, c, hw) = y.nc_hw("softmax").expect("validated in forward");
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (b * c + ch) * hw + p;
                        let dot: f64 = (0..c).map(|ch| gd[idx(ch)] * yd[idx(ch)]).sum();
                        for ch in 0..c {
                            gx[idx(ch)] = yd[idx(ch)] * (gd[idx(ch)] - dot) / temperature;
                        }
                    }
                }
                acc(grads, x, val(x), gx);
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = val(*x).nchw("global_avg_pool").expect("validated in forward");
                let hw = h * w;
                let gx = gd.iter().flat_map(|g| std::iter::repeat_n(g / hw as f64, hw)).collect();
                acc(grads, *x, val(*x), gx);
            }
            Op::ScaleChannels { t, a } => {
                let hw = val(*t).numel() / val(*a).numel();
                let av = val(*a).data();
                let mut gt = vec![0.0; gd.len()];
                let mut ga = vec![0.0; av.len()];
                for (j, (gp, tp)) in gd.chunks(hw).zip(val(*t).data().chunks(hw)).enumerate() {
                    for (o, gv) in gt[j * hw..][..hw].iter_mut().zip(gp) {
                        *o = gv * av[j];
                    }
                    ga[j] = kernels::dot(gp, tp);
                }
                acc(grads, *t, val(*t), gt);
                acc(grads, *a, val(*a), ga);
            }
            Op::ShiftChannels { t, s } => {
                let hw = val(*t).numel() / val(*s).numel();
                let gs = gd.chunks(hw).map(kernels::sum).collect();
                acc(grads, *t, val(*t), gd.to_vec());
                acc(grads, *s, val(*s), gs);
            }
            Op::ChannelGain { a, lambda } => {
                let lv = val(*lambda).data();
                let c = lv.len();
                let mut ga = vec![0.0; gd.len()];
                let mut gl = vec![0.0; c];
                for (row, (grow, arow)) in gd.chunks(c).zip(val(*a).data().chunks(c)).enumerate() {
                    for ch in 0..c {
                        ga[row * c + ch] = grow[ch] * lv[ch];
                        gl[ch] += grow[ch] * arow[ch];
                    }
                }
                acc(grads, *a, val(*a), ga);
                acc(grads, *lambda, val(*lambda), gl);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, c, hw) = val(*x).nc_hw("batch_norm").expect("validated in forward");
                let m = (n * hw) as f64;
                let gv = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        sum_g[ch] += kernels::sum(&gd[off..off + hw]);
                        sum_gx[ch] += kernels::dot(&gd[off..off + hw], &xhat[off..off + hw]);
                    }
                }
                let mut gx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let scale = gv[ch] * inv_std[ch] / m;
                        let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                        for ((o, g), h) in
                            gx[off..off + hw].iter_mut().zip(&gd[off..off + hw]).zip(&xhat[off..off + hw])
                        {
                            *o = scale * (m * g - sg - h * sgx);
                        }
                    }
                }
                acc(grads, *x, val(*x), gx);
                acc(grads, *gamma, val(*gamma), sum_gx);
                acc(grads, *beta, val(*beta), sum_g);
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let (n, c, hw) = val(*x).nc_hw("batch_norm").expect("validated in forward");
                let gv = val(*gamma).data();
                let xv = val(*x).data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            gx[i] = gd[i] * gv[ch] * inv_std[ch];
                            gg[ch] += gd[i] * (xv[i] - mean[ch]) * inv_std[ch];
                            gb[ch] += gd[i];
                        }
                    }
                }
                acc(grads, *x, val(*x), gx);
                acc(grads, *gamma, val(*gamma), gg);
                acc(grads, *beta, val(*beta), gb);
            }
            Op::MaskMul { x, mask } => {
                acc(grads, *x, val(*x), zip_map(gd, mask.data(), |g, m| g * m));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gd[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &label) in labels.iter().enumerate() {
                    gl[b * k + label] -= scale;
                }
                acc(grads, *logits, val(*logits), gl);
            }
            Op::SelectSample { x, index } => {
                let per = gd.len();
                let mut gx = vec![0.0; val(*x).numel()];
                gx[index * per..][..per].copy_from_slice(gd);
                acc(grads, *x, val(*x), gx);
            }
            Op::KernelMixture { weights, row, experts } => {
                let e = experts.len();
                let coeffs = &val(*weights).data()[row * e..][..e];
                let mut gw = vec![0.0; val(*weights).numel()];
                for (i, (&ex, &c)) in experts.iter().zip(coeffs).enumerate() {
                    gw[row * e + i] = gd.iter().zip(val(ex).data()).map(|(g, v)| g * v).sum();
                    acc(grads, ex, val(ex), gd.iter().map(|g| g * c).collect());
                }
                acc(grads, *weights, val(*weights), gw);
            }
            Op::ConcatBatch { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(grads, p, val(p), gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], idx: usize, like: &Tensor, data: Vec<f64>) {
    let t = Tensor::from_parts(like.shape().to_vec(), data);
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn shape2(t: &Tensor) -> [usize; 2] {
    [t.shape()[0], t.shape()[1]]
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
