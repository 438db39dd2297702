use std::collections::{BTreeMap, HashMap};

use super::ops::{self, MatMulDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of leaf values for [`Graph::forward`].
pub trait Bindings {
    fn get(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for HashMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        HashMap::get(self, name)
    }
}

impl Bindings for BTreeMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        BTreeMap::get(self, name)
    }
}

/// Gradients of the seeded output with respect to every `requires_grad` leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, requires_grad: bool },
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Sin(NodeId),
    Cos(NodeId),
    Abs(NodeId),
    Gelu(NodeId),
    Clamp(NodeId, f64, f64),
    MatMul(NodeId, NodeId, MatMulDims),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    BroadcastTo(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    SumAxis(NodeId, usize),
    SumAll(NodeId),
    Masked {
        input: NodeId,
        mask: Tensor,
        mean: bool,
    },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    SegmentPool {
        logits: NodeId,
        values: NodeId,
        groups: Vec<Vec<usize>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Maximum(..) => "maximum",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Abs(_) => "abs",
            Op::Gelu(_) => "gelu",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAxis(..) => "sum_axis",
            Op::SumAll(_) => "sum",
            Op::Masked { mean: true, .. } => "masked_mean",
            Op::Masked { mean: false, .. } => "masked_sum",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::SegmentPool { .. } => "segment_pool",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Maximum(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul(a, b, _) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Abs(a)
            | Op::Gelu(a)
            | Op::Clamp(a, ..)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::Softmax(a) => vec![*a],
            Op::Slice { input, .. } | Op::Masked { input, .. } => vec![*input],
            Op::Concat(parts, _) => parts.clone(),
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::SegmentPool { logits, values, .. } => vec![*logits, *values],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    /// Auxiliary forward state (softmax weights of a segment pool).
    aux: Option<Tensor>,
    needs_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Built,
    Forwarded,
    Consumed,
}

/// A recorded computation over dense tensors.
///
/// Builder methods append nodes after validating shapes; node inputs
/// therefore always precede the node itself, which is the order
/// [`Graph::forward`] evaluates in and [`Graph::backward`] reverses.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    state: State,
    strict: bool,
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
            leaves: HashMap::new(),
            state: State::Built,
            strict: false,
        }
    }

    /// In strict mode any NaN or infinity produced during forward is an error.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Cached output of the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { requires_grad, .. } => *requires_grad,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux: None,
            needs_grad,
        });
        self.state = State::Built;
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named leaf. Re-declaring an existing name returns the same
    /// node when the shape agrees.
    pub fn leaf(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(Error::Shape(format!(
                    "leaf `{name}` redeclared: {:?} vs {shape:?}",
                    self.nodes[id.0].shape
                )));
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                requires_grad,
            },
            shape.to_vec(),
            None,
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op) -> Result<NodeId> {
        let op = make(a, b);
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = ops::broadcast_shape(sa, sb)
            .ok_or_else(|| Error::Shape(format!("{}: {sa:?} vs {sb:?}", op.name())))?;
        Ok(self.push(op, shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Maximum)
    }

    fn unary(&mut self, op: Op) -> NodeId {
        let shape = self.shape(op.inputs()[0]).to_vec();
        self.push(op, shape, None)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(a, factor))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Cos(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Gelu(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softmax(a))
    }

    /// Matrix product. Accepts `[.., m, k] · [k, n]` (the right operand is
    /// shared across all leading axes) or batched `[.., m, k] · [.., k, n]`
    /// with identical leading axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape(format!("matmul: {sa:?} vs {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let dims = if sb.len() == 2 {
            MatMulDims {
                batch: 1,
                m: sa[..sa.len() - 1].iter().product(),
                k,
                n,
                shared_rhs: true,
            }
        } else if sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            MatMulDims {
                batch: sa[..sa.len() - 2].iter().product(),
                m,
                k,
                n,
                shared_rhs: false,
            }
        } else {
            return Err(err());
        };
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Op::MatMul(a, b, dims), shape, None))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {s:?} vs axes {perm:?}")));
        }
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Permute(a, perm.to_vec()), shape, None))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape(format!("transpose: {:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("reshape: {s:?} vs {shape:?}")));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec(), None))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        match ops::broadcast_shape(s, shape) {
            Some(out) if out == shape => Ok(self.push(Op::BroadcastTo(a), shape.to_vec(), None)),
            _ => Err(Error::Shape(format!("broadcast_to: {s:?} vs {shape:?}"))),
        }
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape(format!("concat: {first:?} vs {s:?}")));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(Op::Concat(parts.to_vec(), axis), shape, None))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Shape(format!("slice: {s:?} vs axis {axis} range {start}..{end}")));
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        Ok(self.push(Op::Slice { input: a, axis, start }, shape, None))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::Shape(format!("sum_axis: {s:?} vs axis {axis}")));
        }
        let mut shape = s.to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(self.push(Op::SumAxis(a, axis), shape, None))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![], None)
    }

    /// Sum of the elements where `mask` is non-zero. Masked-out elements are
    /// skipped rather than multiplied by zero, so they never contribute, even
    /// when non-finite.
    pub fn masked_sum(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        self.masked(a, mask, false)
    }

    /// Mean over the elements where `mask` is non-zero; evaluating with an
    /// all-zero mask fails with [`Error::EmptyMask`].
    pub fn masked_mean(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        self.masked(a, mask, true)
    }

    fn masked(&mut self, a: NodeId, mask: Tensor, mean: bool) -> Result<NodeId> {
        if mask.shape() != self.shape(a) {
            return Err(Error::Shape(format!(
                "masked reduction: {:?} vs mask {:?}",
                self.shape(a),
                mask.shape()
            )));
        }
        Ok(self.push(Op::Masked { input: a, mask, mean }, vec![], None))
    }

    /// Layer normalization over the last axis: `gain` and `bias` are vectors
    /// of that axis' length.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("layernorm: scalar input".into()))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape(format!("layernorm: {s:?} vs affine {:?}", self.shape(p))));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, s, None))
    }

    /// Per-channel softmax pooling of the rows of `values` (shape `[n, c]`)
    /// within each group of row indices, weighted by `logits` (`[n, c]`).
    /// Produces `[groups.len(), c]`; empty groups pool to zero.
    pub fn segment_pool(&mut self, logits: NodeId, values: NodeId, groups: Vec<Vec<usize>>) -> Result<NodeId> {
        let (sl, sv) = (self.shape(logits).to_vec(), self.shape(values).to_vec());
        if sl.len() != 2 || sl != sv {
            return Err(Error::Shape(format!("segment_pool: {sl:?} vs {sv:?}")));
        }
        let mut seen = vec![false; sl[0]];
        for &i in groups.iter().flatten() {
            if i >= sl[0] || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Shape(format!("segment_pool: row {i} invalid or repeated for {sl:?}")));
            }
        }
        let shape = vec![groups.len(), sl[1]];
        Ok(self.push(Op::SegmentPool { logits, values, groups }, shape, None))
    }

    /// Evaluates every node and returns the value of `output`.
    pub fn forward(&mut self, bindings: &dyn Bindings, output: NodeId) -> Result<Tensor> {
        self.evaluate(bindings)?;
        Ok(self.nodes[output.0].value.clone().expect("evaluated"))
    }

    /// Evaluates every node, caching outputs for [`Graph::backward`].
    pub fn evaluate(&mut self, bindings: &dyn Bindings) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (value, aux) = self.eval_node(i, bindings)?;
            if self.strict && !value.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                    node: i,
                });
            }
            let node = &mut self.nodes[i];
            node.value = Some(value);
            node.aux = aux;
        }
        self.state = State::Forwarded;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("inputs precede their consumers")
    }

    fn eval_node(&self, i: usize, bindings: &dyn Bindings) -> Result<(Tensor, Option<Tensor>)> {
        let node = &self.nodes[i];
        let shape = &node.shape;
        let v = match &node.op {
            Op::Leaf { name, .. } => {
                let t = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "leaf `{name}`: declared {shape:?}, bound {:?}",
                        t.shape()
                    )));
                }
                t.clone()
            }
            Op::Constant => node.value.clone().expect("constants carry their value"),
            Op::Add(a, b) => ops::zip_broadcast(self.val(*a), self.val(*b), shape, |x, y| x + y),
            Op::Sub(a, b) => ops::zip_broadcast(self.val(*a), self.val(*b), shape, |x, y| x - y),
            Op::Mul(a, b) => ops::zip_broadcast(self.val(*a), self.val(*b), shape, |x, y| x * y),
            Op::Div(a, b) => ops::zip_broadcast(self.val(*a), self.val(*b), shape, |x, y| x / y),
            Op::Maximum(a, b) => ops::zip_broadcast(self.val(*a), self.val(*b), shape, f64::max),
            Op::Neg(a) => self.val(*a).map(|x| -x),
            Op::Scale(a, c) => {
                let c = *c;
                self.val(*a).map(|x| x * c)
            }
            Op::Sin(a) => self.val(*a).map(f64::sin),
            Op::Cos(a) => self.val(*a).map(f64::cos),
            Op::Abs(a) => self.val(*a).map(f64::abs),
            Op::Gelu(a) => self.val(*a).map(ops::gelu),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.val(*a).map(|x| x.clamp(lo, hi))
            }
            Op::MatMul(a, b, dims) => ops::matmul(self.val(*a), self.val(*b), *dims, shape),
            Op::Permute(a, perm) => ops::permute(self.val(*a), perm),
            Op::Reshape(a) => Tensor {
                shape: shape.clone(),
                data: self.val(*a).data().to_vec(),
            },
            Op::BroadcastTo(a) => ops::broadcast_to(self.val(*a), shape),
            Op::Concat(parts, axis) => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                ops::concat(&ts, *axis, shape)
            }
            Op::Slice { input, axis, start } => ops::slice(self.val(*input), *axis, *start, *start + shape[*axis]),
            Op::SumAxis(a, axis) => ops::sum_axis(self.val(*a), *axis, shape),
            Op::SumAll(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Masked { input, mask, mean } => {
                let x = self.val(*input);
                let mut sum = 0.0;
                let mut count = 0usize;
                for (&v, &m) in x.data().iter().zip(mask.data()) {
                    if m != 0.0 {
                        sum += m * v;
                        count += 1;
                    }
                }
                if *mean {
                    if count == 0 {
                        return Err(Error::EmptyMask);
                    }
                    sum /= count as f64;
                }
                Tensor::scalar(sum)
            }
            Op::Softmax(a) => ops::softmax(self.val(*a)),
            Op::LayerNorm { x, gain, bias } => ops::layernorm(self.val(*x), self.val(*gain), self.val(*bias)),
            Op::SegmentPool { logits, values, groups } => {
                let (out, weights) = ops::segment_pool(self.val(*logits), self.val(*values), groups);
                return Ok((out, Some(weights)));
            }
        };
        Ok((v, None))
    }

    /// Propagates `seed` (shaped like `output`) back to every leaf that
    /// requires a gradient. Leaves unreachable from `output` receive zeros.
    pub fn backward(&mut self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if self.state != State::Forwarded {
            return Err(Error::StaleGraph);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Shape(format!(
                "backward seed: {:?} vs output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf { .. } = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in self.input_grads(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (name, &id) in &self.leaves {
            if let Op::Leaf { requires_grad: true, .. } = self.nodes[id.0].op {
                let g = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].shape.clone()));
                out.insert(name.clone(), g);
            }
        }
        self.state = State::Consumed;
        Ok(Gradients { grads: out })
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("forwarded");
        let elementwise = |a: NodeId, f: &dyn Fn(f64, f64) -> f64| {
            let x = self.val(a);
            let data = x.data().iter().zip(g.data()).map(|(&x, &g)| f(x, g)).collect();
            (a, Tensor { shape: x.shape().to_vec(), data })
        };
        match &node.op {
            Op::Leaf { .. } | Op::Constant => vec![],
            Op::Add(a, b) => vec![
                (*a, ops::reduce_to(g, self.shape(*a))),
                (*b, ops::reduce_to(g, self.shape(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, ops::reduce_to(g, self.shape(*a))),
                (*b, ops::reduce_to(&g.map(|x| -x), self.shape(*b))),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let ga = ops::zip_broadcast(g, vb, &node.shape, |g, y| g * y);
                let gb = ops::zip_broadcast(g, va, &node.shape, |g, x| g * x);
                vec![
                    (*a, ops::reduce_to(&ga, va.shape())),
                    (*b, ops::reduce_to(&gb, vb.shape())),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let ga = ops::zip_broadcast(g, vb, &node.shape, |g, y| g / y);
                // d(x/y)/dy = -out / y
                let q = ops::zip_broadcast(out, vb, &node.shape, |o, y| -o / y);
                let gb = ops::zip_broadcast(g, &q, &node.shape, |g, q| g * q);
                vec![
                    (*a, ops::reduce_to(&ga, va.shape())),
                    (*b, ops::reduce_to(&gb, vb.shape())),
                ]
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let xa = ops::broadcast_to(va, &node.shape);
                let xb = ops::broadcast_to(vb, &node.shape);
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for j in 0..g.len() {
                    if xa.data()[j] >= xb.data()[j] {
                        ga[j] = g.data()[j];
                    } else {
                        gb[j] = g.data()[j];
                    }
                }
                let ga = Tensor { shape: node.shape.clone(), data: ga };
                let gb = Tensor { shape: node.shape.clone(), data: gb };
                vec![
                    (*a, ops::reduce_to(&ga, va.shape())),
                    (*b, ops::reduce_to(&gb, vb.shape())),
                ]
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, c) => {
                let c = *c;
                vec![(*a, g.map(|x| x * c))]
            }
            Op::Sin(a) => vec![elementwise(*a, &|x, g| g * x.cos())],
            Op::Cos(a) => vec![elementwise(*a, &|x, g| -g * x.sin())],
            Op::Abs(a) => vec![elementwise(*a, &|x, g| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })],
            Op::Gelu(a) => vec![elementwise(*a, &|x, g| g * ops::gelu_grad(x))],
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![elementwise(*a, &move |x, g| if x >= lo && x <= hi { g } else { 0.0 })]
            }
            Op::MatMul(a, b, dims) => {
                let (ga, gb) = ops::matmul_backward(self.val(*a), self.val(*b), g, *dims);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Permute(a, perm) => vec![(*a, ops::permute(g, &ops::inverse_permutation(perm)))],
            Op::Reshape(a) => vec![(
                *a,
                Tensor {
                    shape: self.shape(*a).to_vec(),
                    data: g.data().to_vec(),
                },
            )],
            Op::BroadcastTo(a) => vec![(*a, ops::reduce_to(g, self.shape(*a)))],
            Op::Concat(parts, axis) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = self.shape(p)[*axis];
                        let gi = ops::slice(g, *axis, start, start + w);
                        start += w;
                        (p, gi)
                    })
                    .collect()
            }
            Op::Slice { input, axis, start } => {
                vec![(*input, ops::unslice(g, self.shape(*input), *axis, *start))]
            }
            Op::SumAxis(a, axis) => {
                let in_shape = self.shape(*a);
                let (outer, _, inner) = ops::split_axis(in_shape, *axis);
                let flat = Tensor {
                    shape: vec![outer * inner],
                    data: g.data().to_vec(),
                };
                vec![(*a, ops::unsum_axis(&flat, in_shape, *axis))]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(self.shape(*a).to_vec(), g.item()))],
            Op::Masked { input, mask, mean } => {
                let count = mask.data().iter().filter(|&&m| m != 0.0).count().max(1);
                let scale = if *mean { g.item() / count as f64 } else { g.item() };
                vec![(*input, mask.map(|m| if m != 0.0 { m * scale } else { 0.0 }))]
            }
            Op::Softmax(a) => vec![(*a, ops::softmax_backward(out, g))],
            Op::LayerNorm { x, gain, bias } => {
                let (gx, ggain, gbias) = ops::layernorm_backward(self.val(*x), self.val(*gain), g);
                vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
            }
            Op::SegmentPool { logits, values, groups } => {
                let weights = node.aux.as_ref().expect("segment pool caches its weights");
                let (gl, gv) = ops::segment_pool_backward(weights, self.val(*values), out, g, groups);
                vec![(*logits, gl), (*values, gv)]
            }
        }
    }
}
