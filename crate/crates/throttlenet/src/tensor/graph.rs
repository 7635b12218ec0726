//! The recording graph: forward op dispatch, FLOP instrumentation, and
//! reverse-mode backward.

use super::kernels;
use super::{OpKind, Tensor, TensorError};

pub type NodeId = usize;

/// One recorded operation: kind, saved forward context, inputs, and output.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Add,
    /// `factor: Some(c)` multiplies by a constant; `None` takes the scalar
    /// from a second input node (the one broadcasting form in the op set).
    ScalarMul { factor: Option<f64> },
    ElemMul,
    Relu,
    Sigmoid,
    Log,
    Reciprocal,
    Concat { axis: usize },
    SumComponents,
    GlobalMeanPool,
    MaxPool2 { argmax: Vec<usize> },
    AvgPool2,
    Flatten { in_shape: Vec<usize> },
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    BatchMean,
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add => OpKind::Add,
            Op::ScalarMul { .. } => OpKind::ScalarMul,
            Op::ElemMul => OpKind::ElemMul,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Log => OpKind::Log,
            Op::Reciprocal => OpKind::Reciprocal,
            Op::Concat { .. } => OpKind::Concat,
            Op::SumComponents => OpKind::SumComponents,
            Op::GlobalMeanPool => OpKind::GlobalMeanPool,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::AvgPool2 => OpKind::AvgPool2,
            Op::Flatten { .. } => OpKind::Flatten,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::BatchMean => OpKind::BatchMean,
        })
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to graph nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// A single-owner tape of operations in topological order.
///
/// Inputs of a node always precede it; at most one backward traversal may run
/// per forward pass. The `flops` counter accumulates the analytic cost of
/// every executed op (one multiply-accumulate = 2 FLOPs; elementwise ops cost
/// one FLOP per element; copies are free).
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    flops: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false, flops: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total FLOPs of all ops recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Inserts an input node, honoring the tensor's requires_grad flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad();
        self.push(Op::Leaf, Vec::new(), t, needs, 0)
    }

    /// Inserts a non-differentiable input node.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let mut t = t;
        if t.requires_grad() {
            t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape");
        }
        self.push(Op::Leaf, Vec::new(), t, false, 0)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool, flops: u64) -> NodeId {
        self.flops += flops;
        self.nodes.push(Node { op, inputs, value, needs_grad });
        self.nodes.len() - 1
    }

    fn inherits_grad(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn out_tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op output shape/data consistent")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n);
        let needs = self.inherits_grad(&[a, b]);
        let flops = 2 * (m * k * n) as u64;
        Ok(self.push(Op::MatMul, vec![a, b], Self::out_tensor(vec![m, n], data), needs, flops))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId, TensorError> {
        let (sx, sw) = (self.nodes[x].value.shape(), self.nodes[w].value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Conv2d,
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = kernels::conv_out_extent(h, kh, stride, padding);
        let ow = kernels::conv_out_extent(wd, kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Conv2d,
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        };
        let patch = cin * kh * kw;
        let wflat = self.nodes[w].value.data();
        let xdata = self.nodes[x].value.data();
        let mut out = vec![0.0; batch * cout * oh * ow];
        for b in 0..batch {
            let col = kernels::im2col(
                &xdata[b * cin * h * wd..(b + 1) * cin * h * wd],
                cin, h, wd, kh, kw, stride, padding, oh, ow,
            );
            let res = kernels::matmul(wflat, &col, cout, patch, oh * ow);
            out[b * cout * oh * ow..(b + 1) * cout * oh * ow].copy_from_slice(&res);
        }
        let needs = self.inherits_grad(&[x, w]);
        let flops = 2 * (batch * cout * patch * oh * ow) as u64;
        Ok(self.push(
            Op::Conv2d { stride, padding },
            vec![x, w],
            Self::out_tensor(vec![batch, cout, oh, ow], out),
            needs,
            flops,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Add,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.inherits_grad(&[a, b]);
        let flops = data.len() as u64;
        Ok(self.push(Op::Add, vec![a, b], Self::out_tensor(sa.to_vec(), data), needs, flops))
    }

    pub fn scalar_mul(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = &self.nodes[x].value;
        let data: Vec<f64> = v.data().iter().map(|e| e * factor).collect();
        let shape = v.shape().to_vec();
        let needs = self.inherits_grad(&[x]);
        let flops = data.len() as u64;
        self.push(Op::ScalarMul { factor: Some(factor) }, vec![x], Self::out_tensor(shape, data), needs, flops)
    }

    /// Multiplies a tensor by a scalar-shaped node (numel 1).
    pub fn scalar_mul_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let sv = &self.nodes[s].value;
        if !sv.is_scalar_shaped() {
            return Err(TensorError::BadShape {
                op: OpKind::ScalarMul,
                shape: sv.shape().to_vec(),
                expected: "a scalar-shaped (numel 1) multiplier",
            });
        }
        let c = sv.item();
        let v = &self.nodes[x].value;
        let data: Vec<f64> = v.data().iter().map(|e| e * c).collect();
        let shape = v.shape().to_vec();
        let needs = self.inherits_grad(&[x, s]);
        let flops = data.len() as u64;
        Ok(self.push(Op::ScalarMul { factor: None }, vec![x, s], Self::out_tensor(shape, data), needs, flops))
    }

    pub fn elem_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::ElemMul,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.inherits_grad(&[a, b]);
        let flops = data.len() as u64;
        Ok(self.push(Op::ElemMul, vec![a, b], Self::out_tensor(sa.to_vec(), data), needs, flops))
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = &self.nodes[x].value;
        let data: Vec<f64> = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        let needs = self.inherits_grad(&[x]);
        let flops = data.len() as u64;
        self.push(op, vec![x], Self::out_tensor(shape, data), needs, flops)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu, |e| if e > 0.0 { e } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log, f64::ln)
    }

    /// Elementwise 1/x; inputs must be nonzero.
    pub fn reciprocal(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Reciprocal, |e| 1.0 / e)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyInputs { op: OpKind::Concat });
        }
        let first = self.nodes[inputs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { op: OpKind::Concat, axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.nodes[id].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().enumerate().all(|(d, &e)| d == axis || e == first[d]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: OpKind::Concat,
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let out_inner = axis_total * tail;
        let mut data = vec![0.0; outer * out_inner];
        let mut offset = 0;
        for &id in inputs {
            let v = &self.nodes[id].value;
            let inner = v.shape()[axis] * tail;
            for o in 0..outer {
                let src = &v.data()[o * inner..(o + 1) * inner];
                data[o * out_inner + offset..o * out_inner + offset + inner].copy_from_slice(src);
            }
            offset += inner;
        }
        let needs = self.inherits_grad(inputs);
        Ok(self.push(Op::Concat { axis }, inputs.to_vec(), Self::out_tensor(out_shape, data), needs, 0))
    }

    /// Elementwise sum of same-shaped inputs.
    pub fn sum_components(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyInputs { op: OpKind::SumComponents });
        }
        let shape = self.nodes[inputs[0]].value.shape().to_vec();
        for &id in &inputs[1..] {
            if self.nodes[id].value.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: OpKind::SumComponents,
                    lhs: shape,
                    rhs: self.nodes[id].value.shape().to_vec(),
                });
            }
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        for &id in inputs {
            for (o, v) in data.iter_mut().zip(self.nodes[id].value.data()) {
                *o += v;
            }
        }
        let needs = self.inherits_grad(inputs);
        let flops = (inputs.len() * numel) as u64;
        Ok(self.push(Op::SumComponents, inputs.to_vec(), Self::out_tensor(shape, data), needs, flops))
    }

    /// (B,C,H,W) -> (B,C) spatial mean.
    pub fn global_mean_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.nodes[x].value.shape();
        if s.len() != 4 {
            return Err(TensorError::BadShape {
                op: OpKind::GlobalMeanPool,
                shape: s.to_vec(),
                expected: "rank-4 (batch, channels, height, width)",
            });
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.nodes[x].value.data();
        let mut data = vec![0.0; b * c];
        for i in 0..b * c {
            let mut sum = 0.0;
            for v in &xd[i * hw..(i + 1) * hw] {
                sum += v;
            }
            data[i] = sum / hw as f64;
        }
        let needs = self.inherits_grad(&[x]);
        let flops = (b * c * hw + b * c) as u64;
        Ok(self.push(Op::GlobalMeanPool, vec![x], Self::out_tensor(vec![b, c], data), needs, flops))
    }

    fn pool_check(&self, x: NodeId, op: OpKind) -> Result<(usize, usize, usize, usize, usize, usize), TensorError> {
        let s = self.nodes[x].value.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                expected: "rank-4 with height and width >= 2",
            });
        }
        Ok((s[0], s[1], s[2], s[3], s[2] / 2, s[3] / 2))
    }

    /// 2x2 max pooling with stride 2; a trailing odd row/column is ignored.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (b, c, h, w, oh, ow) = self.pool_check(x, OpKind::MaxPool2)?;
        let xd = self.nodes[x].value.data();
        let mut data = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bc in 0..b * c {
            let base = bc * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let i0 = base + (2 * oi) * w + 2 * oj;
                    let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = cand[0];
                    for &idx in &cand[1..] {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = bc * oh * ow + oi * ow + oj;
                    data[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let needs = self.inherits_grad(&[x]);
        let flops = 3 * (b * c * oh * ow) as u64;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], Self::out_tensor(vec![b, c, oh, ow], data), needs, flops))
    }

    /// 2x2 average pooling with stride 2; a trailing odd row/column is ignored.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (b, c, h, w, oh, ow) = self.pool_check(x, OpKind::AvgPool2)?;
        let xd = self.nodes[x].value.data();
        let mut data = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let base = bc * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let i0 = base + (2 * oi) * w + 2 * oj;
                    data[bc * oh * ow + oi * ow + oj] =
                        0.25 * (xd[i0] + xd[i0 + 1] + xd[i0 + w] + xd[i0 + w + 1]);
                }
            }
        }
        let needs = self.inherits_grad(&[x]);
        let flops = 4 * (b * c * oh * ow) as u64;
        Ok(self.push(Op::AvgPool2, vec![x], Self::out_tensor(vec![b, c, oh, ow], data), needs, flops))
    }

    /// (B, d1, ..., dk) -> (B, d1*...*dk).
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.nodes[x].value.shape().to_vec();
        if s.len() < 2 {
            return Err(TensorError::BadShape {
                op: OpKind::Flatten,
                shape: s,
                expected: "rank >= 2",
            });
        }
        let rest: usize = s[1..].iter().product();
        let data = self.nodes[x].value.data().to_vec();
        let needs = self.inherits_grad(&[x]);
        Ok(self.push(Op::Flatten { in_shape: s.clone() }, vec![x], Self::out_tensor(vec![s[0], rest], data), needs, 0))
    }

    /// Fused softmax + cross-entropy: logits (B,K) -> per-example loss (B,).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let s = self.nodes[logits].value.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::BadShape {
                op: OpKind::SoftmaxCrossEntropy,
                shape: s.to_vec(),
                expected: "rank-2 logits with one row per label",
            });
        }
        let (b, k) = (s[0], s[1]);
        for &lab in labels {
            if lab >= k {
                return Err(TensorError::LabelOutOfRange { label: lab, classes: k });
            }
        }
        let ld = self.nodes[logits].value.data();
        let mut probs = vec![0.0; b * k];
        let mut losses = vec![0.0; b];
        for row in 0..b {
            let r = &ld[row * k..(row + 1) * k];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in r.iter().enumerate() {
                let e = (v - m).exp();
                probs[row * k + j] = e;
                z += e;
            }
            for p in &mut probs[row * k..(row + 1) * k] {
                *p /= z;
            }
            losses[row] = -(r[labels[row]] - m - z.ln());
        }
        let needs = self.inherits_grad(&[logits]);
        let flops = 5 * (b * k) as u64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec(), probs },
            vec![logits],
            Self::out_tensor(vec![b], losses),
            needs,
            flops,
        ))
    }

    /// Mean over all elements -> rank-0 scalar.
    pub fn batch_mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let n = v.numel();
        let mean = v.data().iter().sum::<f64>() / n as f64;
        let needs = self.inherits_grad(&[x]);
        self.push(Op::BatchMean, vec![x], Tensor::scalar(mean), needs, n as u64)
    }

    /// a - b, composed from scalar-mul and add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let nb = self.scalar_mul(b, -1.0);
        self.add(a, nb)
    }

    /// x + c elementwise, via a constant node.
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[x].value.shape().to_vec();
        let k = self.constant(Tensor::full(&shape, c));
        self.add(x, k).expect("shapes equal by construction")
    }

    /// Reverse-mode gradients of a scalar-shaped loss node.
    ///
    /// Returns dLoss/dTensor for every node that requires gradients;
    /// gradients accumulate over fan-out. May run at most once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardRerun);
        }
        self.backward_done = true;
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar_shaped() {
            return Err(TensorError::NonScalarLoss { shape: lt.shape().to_vec() });
        }

        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss].needs_grad {
            bufs[loss] = Some(vec![1.0]);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in (0..=loss).rev() {
            let Some(g) = bufs[id].take() else { continue };
            self.propagate(id, &g, &mut bufs);
            if self.nodes[id].value.requires_grad() {
                grads[id] = Some(
                    Tensor::new(self.nodes[id].value.shape().to_vec(), g)
                        .expect("gradient shape matches node shape"),
                );
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(bufs: &mut [Option<Vec<f64>>], id: NodeId, numel: usize, add: impl FnOnce(&mut [f64])) {
        let buf = bufs[id].get_or_insert_with(|| vec![0.0; numel]);
        add(buf);
    }

    fn propagate(&self, id: NodeId, g: &[f64], bufs: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let want: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want[0] {
                    let ga = kernels::matmul_nt(g, self.nodes[b].value.data(), m, n, k);
                    Self::accumulate(bufs, a, m * k, |buf| add_into(buf, &ga));
                }
                if want[1] {
                    let gb = kernels::matmul_tn(self.nodes[a].value.data(), g, m, k, n);
                    Self::accumulate(bufs, b, k * n, |buf| add_into(buf, &gb));
                }
            }
            Op::Conv2d { stride, padding } => {
                let (x, w) = (node.inputs[0], node.inputs[1]);
                let sx = self.nodes[x].value.shape();
                let sw = self.nodes[w].value.shape();
                let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let so = node.value.shape();
                let (oh, ow) = (so[2], so[3]);
                let patch = cin * kh * kw;
                let xd = self.nodes[x].value.data();
                let wflat = self.nodes[w].value.data();
                let mut gx = if want[0] { vec![0.0; batch * cin * h * wd] } else { Vec::new() };
                let mut gw = if want[1] { vec![0.0; cout * patch] } else { Vec::new() };
                for bi in 0..batch {
                    let gout = &g[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
                    if want[1] {
                        let col = kernels::im2col(
                            &xd[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin, h, wd, kh, kw, *stride, *padding, oh, ow,
                        );
                        let part = kernels::matmul_nt(gout, &col, cout, oh * ow, patch);
                        add_into(&mut gw, &part);
                    }
                    if want[0] {
                        let gcol = kernels::matmul_tn(wflat, gout, cout, patch, oh * ow);
                        kernels::col2im(
                            &gcol, cin, h, wd, kh, kw, *stride, *padding, oh, ow,
                            &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        );
                    }
                }
                if want[0] {
                    Self::accumulate(bufs, x, gx.len(), |buf| add_into(buf, &gx));
                }
                if want[1] {
                    Self::accumulate(bufs, w, gw.len(), |buf| add_into(buf, &gw));
                }
            }
            Op::Add => {
                for (slot, &inp) in node.inputs.iter().enumerate() {
                    if want[slot] {
                        Self::accumulate(bufs, inp, g.len(), |buf| add_into(buf, g));
                    }
                }
            }
            Op::ScalarMul { factor } => {
                let x = node.inputs[0];
                match factor {
                    Some(c) => {
                        if want[0] {
                            Self::accumulate(bufs, x, g.len(), |buf| {
                                for (o, gi) in buf.iter_mut().zip(g) {
                                    *o += c * gi;
                                }
                            });
                        }
                    }
                    None => {
                        let s = node.inputs[1];
                        let c = self.nodes[s].value.item();
                        if want[0] {
                            Self::accumulate(bufs, x, g.len(), |buf| {
                                for (o, gi) in buf.iter_mut().zip(g) {
                                    *o += c * gi;
                                }
                            });
                        }
                        if want[1] {
                            let xd = self.nodes[x].value.data();
                            let gs: f64 = g.iter().zip(xd).map(|(gi, xi)| gi * xi).sum();
                            Self::accumulate(bufs, s, 1, |buf| buf[0] += gs);
                        }
                    }
                }
            }
            Op::ElemMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if want[0] {
                    let bd = self.nodes[b].value.data();
                    Self::accumulate(bufs, a, g.len(), |buf| {
                        for ((o, gi), bi) in buf.iter_mut().zip(g).zip(bd) {
                            *o += gi * bi;
                        }
                    });
                }
                if want[1] {
                    let ad = self.nodes[a].value.data();
                    Self::accumulate(bufs, b, g.len(), |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(g).zip(ad) {
                            *o += gi * ai;
                        }
                    });
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                if want[0] {
                    let xd = self.nodes[x].value.data();
                    Self::accumulate(bufs, x, g.len(), |buf| {
                        for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xd) {
                            if *xi > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid => {
                let x = node.inputs[0];
                if want[0] {
                    let yd = node.value.data();
                    Self::accumulate(bufs, x, g.len(), |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(g).zip(yd) {
                            *o += gi * yi * (1.0 - yi);
                        }
                    });
                }
            }
            Op::Log => {
                let x = node.inputs[0];
                if want[0] {
                    let xd = self.nodes[x].value.data();
                    Self::accumulate(bufs, x, g.len(), |buf| {
                        for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xd) {
                            *o += gi / xi;
                        }
                    });
                }
            }
            Op::Reciprocal => {
                let x = node.inputs[0];
                if want[0] {
                    let yd = node.value.data();
                    Self::accumulate(bufs, x, g.len(), |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(g).zip(yd) {
                            *o -= gi * yi * yi;
                        }
                    });
                }
            }
            Op::Concat { axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let tail: usize = out_shape[*axis + 1..].iter().product();
                let out_inner = out_shape[*axis] * tail;
                let mut offset = 0;
                for (slot, &inp) in node.inputs.iter().enumerate() {
                    let ext = self.nodes[inp].value.shape()[*axis];
                    let inner = ext * tail;
                    if want[slot] {
                        let numel = self.nodes[inp].value.numel();
                        Self::accumulate(bufs, inp, numel, |buf| {
                            for o in 0..outer {
                                let src = &g[o * out_inner + offset..o * out_inner + offset + inner];
                                add_into(&mut buf[o * inner..(o + 1) * inner], src);
                            }
                        });
                    }
                    offset += inner;
                }
            }
            Op::SumComponents => {
                for (slot, &inp) in node.inputs.iter().enumerate() {
                    if want[slot] {
                        Self::accumulate(bufs, inp, g.len(), |buf| add_into(buf, g));
                    }
                }
            }
            Op::GlobalMeanPool => {
                let x = node.inputs[0];
                if want[0] {
                    let sx = self.nodes[x].value.shape();
                    let hw = sx[2] * sx[3];
                    let scale = 1.0 / hw as f64;
                    Self::accumulate(bufs, x, sx.iter().product(), |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            let v = gi * scale;
                            for o in &mut buf[i * hw..(i + 1) * hw] {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::MaxPool2 { argmax } => {
                let x = node.inputs[0];
                if want[0] {
                    let numel = self.nodes[x].value.numel();
                    Self::accumulate(bufs, x, numel, |buf| {
                        for (gi, &src) in g.iter().zip(argmax) {
                            buf[src] += gi;
                        }
                    });
                }
            }
            Op::AvgPool2 => {
                let x = node.inputs[0];
                if want[0] {
                    let sx = self.nodes[x].value.shape();
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let so = node.value.shape();
                    let (oh, ow) = (so[2], so[3]);
                    Self::accumulate(bufs, x, b * c * h * w, |buf| {
                        for bc in 0..b * c {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let v = 0.25 * g[bc * oh * ow + oi * ow + oj];
                                    let i0 = bc * h * w + (2 * oi) * w + 2 * oj;
                                    buf[i0] += v;
                                    buf[i0 + 1] += v;
                                    buf[i0 + w] += v;
                                    buf[i0 + w + 1] += v;
                                }
                            }
                        }
                    });
                }
            }
            Op::Flatten { in_shape } => {
                let x = node.inputs[0];
                if want[0] {
                    let numel = in_shape.iter().product();
                    Self::accumulate(bufs, x, numel, |buf| add_into(buf, g));
                }
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let x = node.inputs[0];
                if want[0] {
                    let k = self.nodes[x].value.shape()[1];
                    Self::accumulate(bufs, x, labels.len() * k, |buf| {
                        for (row, (gi, &lab)) in g.iter().zip(labels).enumerate() {
                            for j in 0..k {
                                let indicator = if j == lab { 1.0 } else { 0.0 };
                                buf[row * k + j] += gi * (probs[row * k + j] - indicator);
                            }
                        }
                    });
                }
            }
            Op::BatchMean => {
                let x = node.inputs[0];
                if want[0] {
                    let n = self.nodes[x].value.numel();
                    let v = g[0] / n as f64;
                    Self::accumulate(bufs, x, n, |buf| {
                        for o in buf.iter_mut() {
                            *o += v;
                        }
                    });
                }
            }
        }
    }

    /// Operation kind of a node, None for leaves.
    pub fn op_kind(&self, id: NodeId) -> Option<OpKind> {
        self.nodes[id].op.kind()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
