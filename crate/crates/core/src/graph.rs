//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of operation records. Parents always
//! precede children, so the backward pass is a single reverse sweep over the
//! arena. The op set is exactly what the decomposed CNN classifier needs:
//! 1-d convolution with max-over-time pooling, affine projection, sigmoid,
//! ReLU, concatenation, elementwise arithmetic, softmax cross-entropy and
//! the L1 / squared-L2 penalty reductions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::tensor::{check_same_shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Multiply by a compile-time constant factor.
    ScaleConst(NodeId, f64),
    /// Multiply a tensor by a scalar node (attention weights).
    ScaleByScalar { scalar: NodeId, tensor: NodeId },
    /// Multiply `x[..., j]` by `m[j]` along the last axis.
    BroadcastMulLast { tensor: NodeId, last: NodeId },
    Sigmoid(NodeId),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    /// `out = input^T · weights`, input `[n]`, weights `[n, m]`.
    Affine { input: NodeId, weights: NodeId },
    /// Valid 1-d convolution over the token axis followed by max-over-time
    /// pooling; `argmax[j]` is the winning window of filter `j`.
    Conv1dMaxPool {
        input: NodeId,
        filters: NodeId,
        argmax: Vec<usize>,
    },
    /// Negative log-softmax at `label`; `softmax` is saved for backward.
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        softmax: Vec<f64>,
    },
    /// Sum of absolute values.
    L1(NodeId),
    /// Sum of squared entries.
    SumSquares(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to the given node.
    ///
    /// Nodes with no path to the root yield `None`; use
    /// [`Gradients::get_or_zero`] when a dense answer is wanted.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn get_or_zero(&self, graph: &Graph, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A trainable leaf: gradients are computed for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable leaf (inputs, frozen parameters, dropout masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        check_same_shape("sub", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale_const(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(value, Op::ScaleConst(x, factor), ng)
    }

    pub fn scale_by_scalar(&mut self, scalar: NodeId, tensor: NodeId) -> Result<NodeId, CoreError> {
        if self.value(scalar).len() != 1 {
            return Err(CoreError::ShapeMismatch {
                context: "scale_by_scalar",
                expected: vec![],
                actual: self.value(scalar).shape().to_vec(),
            });
        }
        let s = self.value(scalar).data()[0];
        let value = self.value(tensor).map(|v| v * s);
        let ng = self.needs(scalar) || self.needs(tensor);
        Ok(self.push(value, Op::ScaleByScalar { scalar, tensor }, ng))
    }

    /// `out[..., j] = x[..., j] * m[j]` where `m` is 1-d and matches the
    /// last axis of `x`.
    pub fn broadcast_mul_last(&mut self, tensor: NodeId, last: NodeId) -> Result<NodeId, CoreError> {
        let tshape = self.value(tensor).shape().to_vec();
        let mshape = self.value(last).shape().to_vec();
        let n = *tshape.last().ok_or(CoreError::ShapeMismatch {
            context: "broadcast_mul_last",
            expected: vec![1],
            actual: tshape.clone(),
        })?;
        if mshape != [n] {
            return Err(CoreError::ShapeMismatch {
                context: "broadcast_mul_last",
                expected: vec![n],
                actual: mshape,
            });
        }
        let m = self.value(last).data().to_vec();
        let data = self
            .value(tensor)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * m[i % n])
            .collect();
        let value = Tensor::new(tshape, data)?;
        let ng = self.needs(tensor) || self.needs(last);
        Ok(self.push(value, Op::BroadcastMulLast { tensor, last }, ng))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Concatenation of 1-d tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, CoreError> {
        if parts.is_empty() {
            return Err(CoreError::EmptyInput { context: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape().len() != 1 {
                return Err(CoreError::ShapeMismatch {
                    context: "concat",
                    expected: vec![self.value(p).len()],
                    actual: self.value(p).shape().to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![data.len()], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Matrix-vector product `weights^T · input` with `input: [n]`,
    /// `weights: [n, m]`.
    pub fn affine(&mut self, input: NodeId, weights: NodeId) -> Result<NodeId, CoreError> {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weights).shape().to_vec();
        if ishape.len() != 1 || wshape.len() != 2 || wshape[0] != ishape[0] {
            return Err(CoreError::ShapeMismatch {
                context: "affine",
                expected: ishape,
                actual: wshape,
            });
        }
        let (n, m) = (wshape[0], wshape[1]);
        let iv = self.value(input).data();
        let wv = self.value(weights).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            let x = iv[i];
            for j in 0..m {
                out[j] += x * wv[i * m + j];
            }
        }
        let value = Tensor::new(vec![m], out)?;
        let ng = self.needs(input) || self.needs(weights);
        Ok(self.push(value, Op::Affine { input, weights }, ng))
    }

    /// Valid stride-1 convolution over the token axis followed by
    /// max-over-time pooling. `input: [len, D]`, `filters: [F, D, N_F]`,
    /// output `[N_F]`. Pooling ties break toward the lowest window index.
    pub fn conv1d_maxpool(&mut self, input: NodeId, filters: NodeId) -> Result<NodeId, CoreError> {
        let ishape = self.value(input).shape().to_vec();
        let fshape = self.value(filters).shape().to_vec();
        if ishape.len() != 2 || fshape.len() != 3 || ishape[1] != fshape[1] {
            return Err(CoreError::ShapeMismatch {
                context: "conv1d_maxpool",
                expected: ishape,
                actual: fshape,
            });
        }
        let (len, d) = (ishape[0], ishape[1]);
        let (f, nf) = (fshape[0], fshape[2]);
        if len < f {
            return Err(CoreError::Invalid(alloc::format!(
                "conv1d_maxpool: input length {len} shorter than filter size {f}"
            )));
        }
        let iv = self.value(input).data();
        let fv = self.value(filters).data();
        let windows = len - f + 1;
        let mut out = vec![f64::NEG_INFINITY; nf];
        let mut argmax = vec![0usize; nf];
        for p in 0..windows {
            // activation of every filter at window p
            let mut acts = vec![0.0; nf];
            for k in 0..f {
                for dd in 0..d {
                    let x = iv[(p + k) * d + dd];
                    if x == 0.0 {
                        continue;
                    }
                    let base = (k * d + dd) * nf;
                    for j in 0..nf {
                        acts[j] += x * fv[base + j];
                    }
                }
            }
            for j in 0..nf {
                if acts[j] > out[j] {
                    out[j] = acts[j];
                    argmax[j] = p;
                }
            }
        }
        let value = Tensor::new(vec![nf], out)?;
        let ng = self.needs(input) || self.needs(filters);
        Ok(self.push(
            value,
            Op::Conv1dMaxPool {
                input,
                filters,
                argmax,
            },
            ng,
        ))
    }

    /// `-log softmax(logits)[label]`, numerically stable.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId, CoreError> {
        let lv = self.value(logits);
        if lv.shape().len() != 1 {
            return Err(CoreError::ShapeMismatch {
                context: "softmax_cross_entropy",
                expected: vec![lv.len()],
                actual: lv.shape().to_vec(),
            });
        }
        let classes = lv.len();
        if label >= classes {
            return Err(CoreError::LabelOutOfRange { label, classes });
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|&v| libm::exp(v - max)).collect();
        let sum: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let loss = libm::log(sum) + max - lv.data()[label];
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            },
            ng,
        ))
    }

    /// Sum of absolute values, reduced to a scalar.
    pub fn l1(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).l1());
        let ng = self.needs(x);
        self.push(value, Op::L1(x), ng)
    }

    /// Sum of squared entries, reduced to a scalar.
    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum_squares());
        let ng = self.needs(x);
        self.push(value, Op::SumSquares(x), ng)
    }

    /// Reverse sweep from a scalar root. Gradients are accumulated only
    /// into nodes that (transitively) lead to a trainable leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, CoreError> {
        if !self.value(root).is_scalar() {
            return Err(CoreError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(idx, &grad, &mut grads);
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d = elementwise(grad, self.value(b), |g, y| g * y);
                    self.accumulate(grads, a, d);
                }
                if self.needs(b) {
                    let d = elementwise(grad, self.value(a), |g, x| g * x);
                    self.accumulate(grads, b, d);
                }
            }
            Op::ScaleConst(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, grad.map(|v| v * f));
            }
            Op::ScaleByScalar { scalar, tensor } => {
                let (scalar, tensor) = (*scalar, *tensor);
                if self.needs(tensor) {
                    let s = self.value(scalar).data()[0];
                    self.accumulate(grads, tensor, grad.map(|v| v * s));
                }
                if self.needs(scalar) {
                    let dot: f64 = grad
                        .data()
                        .iter()
                        .zip(self.value(tensor).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    let shape = self.value(scalar).shape().to_vec();
                    self.accumulate(grads, scalar, Tensor::new(shape, vec![dot]).unwrap());
                }
            }
            Op::BroadcastMulLast { tensor, last } => {
                let (tensor, last) = (*tensor, *last);
                let n = self.value(last).len();
                if self.needs(tensor) {
                    let m = self.value(last).data();
                    let data = grad
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * m[i % n])
                        .collect();
                    let d = Tensor::new(self.value(tensor).shape().to_vec(), data).unwrap();
                    self.accumulate(grads, tensor, d);
                }
                if self.needs(last) {
                    let mut acc = vec![0.0; n];
                    for (i, (&g, &x)) in grad.data().iter().zip(self.value(tensor).data()).enumerate() {
                        acc[i % n] += g * x;
                    }
                    self.accumulate(grads, last, Tensor::new(vec![n], acc).unwrap());
                }
            }
            Op::Sigmoid(x) => {
                let d = elementwise(grad, &node.value, |g, s| g * s * (1.0 - s));
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = elementwise(grad, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let piece = Tensor::new(vec![len], grad.data()[offset..offset + len].to_vec()).unwrap();
                    self.accumulate(grads, p, piece);
                    offset += len;
                }
            }
            Op::Affine { input, weights } => {
                let (input, weights) = (*input, *weights);
                let wshape = self.value(weights).shape();
                let (n, m) = (wshape[0], wshape[1]);
                let g = grad.data();
                if self.needs(input) {
                    let wv = self.value(weights).data();
                    let mut din = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..m {
                            din[i] += wv[i * m + j] * g[j];
                        }
                    }
                    self.accumulate(grads, input, Tensor::new(vec![n], din).unwrap());
                }
                if self.needs(weights) {
                    let iv = self.value(input).data();
                    let mut dw = vec![0.0; n * m];
                    for i in 0..n {
                        let x = iv[i];
                        for j in 0..m {
                            dw[i * m + j] = x * g[j];
                        }
                    }
                    self.accumulate(grads, weights, Tensor::new(vec![n, m], dw).unwrap());
                }
            }
            Op::Conv1dMaxPool {
                input,
                filters,
                argmax,
            } => {
                let (input, filters) = (*input, *filters);
                let fshape = self.value(filters).shape().to_vec();
                let (f, d, nf) = (fshape[0], fshape[1], fshape[2]);
                let g = grad.data();
                if self.needs(filters) {
                    let iv = self.value(input).data();
                    let mut df = vec![0.0; f * d * nf];
                    for j in 0..nf {
                        let p = argmax[j];
                        for k in 0..f {
                            for dd in 0..d {
                                df[(k * d + dd) * nf + j] = g[j] * iv[(p + k) * d + dd];
                            }
                        }
                    }
                    self.accumulate(grads, filters, Tensor::new(fshape.clone(), df).unwrap());
                }
                if self.needs(input) {
                    let fv = self.value(filters).data();
                    let ishape = self.value(input).shape().to_vec();
                    let mut di = vec![0.0; ishape[0] * d];
                    for j in 0..nf {
                        let p = argmax[j];
                        for k in 0..f {
                            for dd in 0..d {
                                di[(p + k) * d + dd] += g[j] * fv[(k * d + dd) * nf + j];
                            }
                        }
                    }
                    self.accumulate(grads, input, Tensor::new(ishape, di).unwrap());
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            } => {
                let g = grad.item();
                let mut d: Vec<f64> = softmax.iter().map(|&s| g * s).collect();
                d[*label] -= g;
                let n = d.len();
                self.accumulate(grads, *logits, Tensor::new(vec![n], d).unwrap());
            }
            Op::L1(x) => {
                let g = grad.item();
                let d = self.value(*x).map(|v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::SumSquares(x) => {
                let g = grad.item();
                let d = self.value(*x).map(|v| 2.0 * v * g);
                self.accumulate(grads, *x, d);
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}
