//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is an eager tape: each op call computes its value immediately
//! and records parents for the backward sweep. Graphs are single-owner
//! during training; frozen networks use the tape-free forward path in the
//! zoo module instead.

use crate::error::{FcxError, Result};
use crate::ops;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, b: NodeId, geom: ops::ConvGeom },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Flatten { x: NodeId },
    PadChannels { x: NodeId },
    Mse { a: NodeId, b: NodeId },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    Sum { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    name: Option<String>,
}

/// Tape of operations with values and, after [`Graph::backward`], gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, name: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (inputs, targets, frozen tensors).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value)
    }

    /// Trainable leaf; gradients are produced for it by [`Graph::backward`].
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf { trainable: true }, value);
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::affine_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = ops::ConvGeom::resolve(self.value(x).shape(), self.value(k).shape(), stride, pad)?;
        if self.value(b).shape() != [geom.c_out] {
            return Err(FcxError::ShapeMismatch {
                expected: vec![geom.c_out],
                got: self.value(b).shape().to_vec(),
            });
        }
        let y = ops::conv2d_forward(self.value(x), self.value(k), self.value(b), &geom);
        Ok(self.push(Op::Conv2d { x, k, b, geom }, y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu_forward(self.value(x));
        self.push(Op::Relu { x }, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.value(x).scale(c);
        self.push(Op::Scale { x, c }, y)
    }

    /// Collapses all non-batch axes: `[n, ...] -> [n, d]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        let n = s[0];
        let d: usize = s[1..].iter().product();
        let y = self.value(x).reshaped(&[n, d])?;
        Ok(self.push(Op::Flatten { x }, y))
    }

    pub fn pad_channels(&mut self, x: NodeId, c_out: usize) -> Result<NodeId> {
        let y = ops::pad_channels_forward(self.value(x), c_out)?;
        Ok(self.push(Op::PadChannels { x }, y))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mse_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mse { a, b }, Tensor::scalar(v)))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_ce_forward(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(v))
    }

    /// Reverse sweep from a scalar loss. Repeated calls overwrite previous
    /// gradients; the tape itself is unchanged.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(FcxError::NotScalar { shape: self.nodes[loss.0].value.shape().to_vec() });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[i].grad.clone() else { continue };
            match self.nodes[i].op.clone() {
                Op::Leaf { .. } => {}
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) =
                        ops::affine_backward(self.value(x), self.value(w), &gy);
                    self.accumulate(x, dx)?;
                    self.accumulate(w, dw)?;
                    self.accumulate(b, db)?;
                }
                Op::Conv2d { x, k, b, geom } => {
                    let (dx, dk, db) =
                        ops::conv2d_backward(self.value(x), self.value(k), &gy, &geom);
                    self.accumulate(x, dx)?;
                    self.accumulate(k, dk)?;
                    self.accumulate(b, db)?;
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(x), &gy);
                    self.accumulate(x, dx)?;
                }
                Op::Add { a, b } => {
                    self.accumulate(a, gy.clone())?;
                    self.accumulate(b, gy)?;
                }
                Op::Scale { x, c } => {
                    self.accumulate(x, gy.scale(c))?;
                }
                Op::Flatten { x } => {
                    let dx = gy.reshaped(self.value(x).shape())?;
                    self.accumulate(x, dx)?;
                }
                Op::PadChannels { x } => {
                    let dx = ops::pad_channels_backward(self.value(x).shape(), &gy);
                    self.accumulate(x, dx)?;
                }
                Op::Mse { a, b } => {
                    let (da, db) = ops::mse_backward(self.value(a), self.value(b), gy.item());
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let dl = ops::softmax_ce_backward(&probs, &labels, gy.item());
                    self.accumulate(logits, dl)?;
                }
                Op::Sum { x } => {
                    let ones = Tensor::new(self.value(x).shape(), crate::tensor::Init::Constant(gy.item()), 0)?;
                    self.accumulate(x, ones)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) -> Result<()> {
        match &mut self.nodes[id.0].grad {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Gradients of all trainable leaves, keyed by parameter name.
    pub fn trainable_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let (Op::Leaf { trainable: true }, Some(name)) = (&node.op, &node.name) {
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        out
    }

    /// Smallest |pre-activation| over every ReLU input on the tape; used to
    /// keep finite-difference probes away from kinks.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.nodes[x.0].value.data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (param, flat index, rel err) for every coordinate over tolerance.
    pub failures: Vec<(String, usize, f64)>,
    pub passed: bool,
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares backprop gradients of `build`'s scalar loss against central
/// finite differences on up to `max_coords` sampled coordinates.
///
/// `build` must be pure: same parameters, same loss.
pub fn grad_check<F>(
    build: F,
    params: &BTreeMap<String, Tensor>,
    tolerance: f64,
    max_coords: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    use rand::{Rng, SeedableRng};

    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, t) in p {
            ids.insert(name.clone(), g.input(t.clone()));
        }
        let loss = build(&mut g, &ids)?;
        if !g.value(loss).is_scalar() {
            return Err(FcxError::NotScalar { shape: g.value(loss).shape().to_vec() });
        }
        Ok(g.value(loss).item())
    };

    // Analytic gradients in one backward pass.
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.param(name, t.clone()));
    }
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic = g.trainable_grads();

    let total: usize = params.values().map(Tensor::len).sum();
    let mut coords: Vec<(String, usize)> = Vec::new();
    if total <= max_coords {
        for (name, t) in params {
            for i in 0..t.len() {
                coords.push((name.clone(), i));
            }
        }
    } else {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let names: Vec<&String> = params.keys().collect();
        let sizes: Vec<usize> = params.values().map(Tensor::len).collect();
        while coords.len() < max_coords {
            let mut flat = rng.gen_range(0..total);
            let mut pick = 0;
            while flat >= sizes[pick] {
                flat -= sizes[pick];
                pick += 1;
            }
            coords.push((names[pick].clone(), flat));
        }
    }

    let mut max_rel = 0.0_f64;
    let mut failures = Vec::new();
    for (name, idx) in &coords {
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data_mut()[*idx] += eps;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data_mut()[*idx] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic[name].data()[*idx];
        let rel = grad_rel_err(a, numeric);
        max_rel = max_rel.max(rel);
        if rel > tolerance {
            failures.push((name.clone(), *idx, rel));
        }
    }

    Ok(GradCheckReport { checked: coords.len(), max_rel_err: max_rel, failures: failures.clone(), passed: failures.is_empty() })
}
