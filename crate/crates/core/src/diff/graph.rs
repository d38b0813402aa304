//! Dynamic computation graph with reverse-mode accumulation.
//!
//! A [`Graph`] is rebuilt for every batch. Each op evaluates eagerly and
//! records its inputs, so nodes are appended in topological order and the
//! backward sweep is a single reverse pass over the node list.

use std::rc::Rc;

use crate::diff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Relu,
    Tanh,
    Exp,
    Neg,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Deliberately wrong backward rules, used to prove the gradient checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Uses `1 - tanh(x)` instead of `1 - tanh(x)^2`.
    TanhDerivative,
    /// Drops the `aᵀ·g` term of matmul for the right operand.
    MatmulRight,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    ClampMin(NodeId, f64),
    Reduce(NodeId, ReduceKind, Option<usize>),
    SliceCols(NodeId, usize, usize),
    Concat(Vec<NodeId>),
    PermuteCols(NodeId, Rc<[usize]>),
    GatherRows(NodeId, Rc<[usize]>),
    SegmentSum(NodeId, Rc<[usize]>),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_grads: Vec<Option<Tensor>>,
    track_params: bool,
    backward_done: bool,
    fault: Option<GradFault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph whose parameter leaves receive gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_grads: Vec::new(),
            track_params: true,
            backward_done: false,
            fault: None,
        }
    }

    /// A graph that treats parameters as constants. Backward is a no-op.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<GradFault>) -> Self {
        self.fault = fault;
        self
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let track = self.track_params;
        self.push(store.get(id).clone(), Op::Param(id), track)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    fn broadcast_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let row_bias = match (sa, sb) {
            ([_, c], [n]) | ([_, c], [1, n]) => c == n,
            _ => false,
        };
        if row_bias {
            Ok(true)
        } else {
            Err(Error::dim(op, format!("{sa:?} with {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let bcast = self.broadcast_check(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let v = if bcast {
            let (_, c) = va.as_rows();
            let bias = vb.data();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bias[i % c]))
                .collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else {
            va.zip_map(vb, f)?
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, op, ng))
    }

    /// Same-shape addition, or matrix plus row-vector bias.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Same-shape product, or matrix times row vector.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::recip, Op::Recip(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    /// `max(x, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Dispatches one of the registered element-wise ops by kind.
    pub fn elementwise(&mut self, kind: ElementwiseKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            ElementwiseKind::Add | ElementwiseKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let a = inputs[0];
        Ok(match kind {
            ElementwiseKind::Add => self.add(a, inputs[1])?,
            ElementwiseKind::Mul => self.mul(a, inputs[1])?,
            ElementwiseKind::Relu => self.relu(a),
            ElementwiseKind::Tanh => self.tanh(a),
            ElementwiseKind::Exp => self.exp(a),
            ElementwiseKind::Neg => self.neg(a),
            ElementwiseKind::Scale(f) => self.scale(a, f),
        })
    }

    /// Sum or mean over `axis`, or over everything when `axis` is `None`.
    pub fn reduce(&mut self, kind: ReduceKind, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let t = self.value(a);
        let rank = t.rank();
        let v = match axis {
            None => {
                let s = t.sum();
                Tensor::scalar(match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / t.numel() as f64,
                })
            }
            Some(ax) if ax >= rank || rank > 2 => {
                return Err(Error::InvalidAxis { axis: ax, rank })
            }
            Some(_) if rank == 1 => {
                let s = t.sum();
                Tensor::scalar(match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / t.numel() as f64,
                })
            }
            Some(ax) => {
                let (r, c) = t.dims2()?;
                let d = t.data();
                let (out, n) = if ax == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                            *o += x;
                        }
                    }
                    (out, r)
                } else {
                    let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
                    (out, c)
                };
                let out = match kind {
                    ReduceKind::Sum => out,
                    ReduceKind::Mean => out.into_iter().map(|x| x / n as f64).collect(),
                };
                let len = out.len();
                Tensor::from_parts(vec![len], out)
            }
        };
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reduce(a, kind, axis), ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.reduce(ReduceKind::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.reduce(ReduceKind::Mean, a, None).expect("full reduction")
    }

    /// Columns `start..end` along the last axis.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a).slice_cols(start, end)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceCols(a, start, end), ng))
    }

    /// Splits the last axis at each boundary in `cuts`.
    pub fn split_cols(&mut self, a: NodeId, cuts: &[usize]) -> Result<Vec<NodeId>> {
        let (_, c) = self.value(a).as_rows();
        let mut bounds = vec![0];
        bounds.extend_from_slice(cuts);
        bounds.push(c);
        bounds
            .windows(2)
            .map(|w| self.slice_cols(a, w[0], w[1]))
            .collect()
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let lead = self.value(first).shape()[..self.value(first).rank().saturating_sub(1)].to_vec();
        if self.value(first).rank() == 0 {
            return Err(Error::dim("concat", "cannot concatenate scalars"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", format!("{:?} vs leading {lead:?}", s)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), ng))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: NodeId, perm: Rc<[usize]>) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = t.as_rows();
        if t.rank() == 0 || perm.len() != c || !is_permutation(&perm) {
            return Err(Error::dim("permute_cols", format!("bad permutation for width {c}")));
        }
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for (j, &p) in perm.iter().enumerate() {
                out[i * c + j] = d[i * c + p];
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.ng(a);
        Ok(self.push(v, Op::PermuteCols(a, perm), ng))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: NodeId, index: Rc<[usize]>) -> Result<NodeId> {
        let v = self.value(a).select_rows(&index)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::GatherRows(a, index), ng))
    }

    /// Sums rows into `n_segments` buckets: `out[s] = Σ_{i: seg[i]=s} a[i]`.
    pub fn segment_sum(&mut self, a: NodeId, seg: Rc<[usize]>, n_segments: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if seg.len() != r {
            return Err(Error::dim("segment_sum", format!("{} segment ids for {r} rows", seg.len())));
        }
        let mut out = vec![0.0; n_segments * c];
        for (i, &s) in seg.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::OutOfBounds {
                    start: s,
                    end: s + 1,
                    extent: n_segments,
                });
            }
            for (o, x) in out[s * c..(s + 1) * c].iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        let v = Tensor::from_parts(vec![n_segments, c], out);
        let ng = self.ng(a);
        Ok(self.push(v, Op::SegmentSum(a, seg), ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Clears accumulated parameter gradients so backward may run again.
    pub fn reset(&mut self) {
        self.param_grads.clear();
        self.backward_done = false;
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.param_grads.get(id.0).and_then(Option::as_ref)
    }

    /// Moves the accumulated gradients out, indexed by parameter id.
    pub fn take_param_grads(&mut self) -> Vec<Option<Tensor>> {
        std::mem::take(&mut self.param_grads)
    }

    /// Accumulates `d loss / d param` for every tracked parameter.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    if self.param_grads.len() <= pid.0 {
                        self.param_grads.resize(pid.0 + 1, None);
                    }
                    match &mut self.param_grads[pid.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
                op => {
                    for (input, contrib) in self.input_grads(idx, &op, &g)? {
                        if !self.nodes[input.0].needs_grad {
                            continue;
                        }
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&contrib),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    fn input_grads(&self, idx: usize, op: &Op, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let out = &self.nodes[idx].value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let elementwise = |a: NodeId, f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = val(a).data();
            let y = out.data();
            let data = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gi)| f(gi, x[i], y[i]))
                .collect();
            vec![(a, Tensor::from_parts(val(a).shape().to_vec(), data))]
        };
        Ok(match op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                let mut res = Vec::with_capacity(2);
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), val(*b).data(), &mut ga, m, n, k);
                    res.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    if self.fault != Some(GradFault::MatmulRight) {
                        gemm_tn(val(*a).data(), g.data(), &mut gb, m, k, n);
                    }
                    res.push((*b, Tensor::from_parts(vec![k, n], gb)));
                }
                res
            }
            Op::Add(a, b) => {
                let mut res = Vec::with_capacity(2);
                if self.ng(*a) {
                    res.push((*a, g.clone()));
                }
                if self.ng(*b) {
                    res.push((*b, reduce_to_shape(g, val(*b).shape())));
                }
                res
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut res = Vec::with_capacity(2);
                let bcast = va.shape() != vb.shape();
                let (_, c) = va.as_rows();
                if self.ng(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * vb.data()[if bcast { i % c } else { i }])
                        .collect();
                    res.push((*a, Tensor::from_parts(va.shape().to_vec(), data)));
                }
                if self.ng(*b) {
                    let prod = g.zip_map(va, |x, y| x * y)?;
                    res.push((*b, reduce_to_shape(&prod, vb.shape())));
                }
                res
            }
            Op::Relu(a) => elementwise(*a, &|gi, x, _| if x > 0.0 { gi } else { 0.0 }),
            Op::Tanh(a) => {
                if self.fault == Some(GradFault::TanhDerivative) {
                    elementwise(*a, &|gi, _, y| gi * (1.0 - y))
                } else {
                    elementwise(*a, &|gi, _, y| gi * (1.0 - y * y))
                }
            }
            Op::Exp(a) => elementwise(*a, &|gi, _, y| gi * y),
            Op::Log(a) => elementwise(*a, &|gi, x, _| gi / x),
            Op::Recip(a) => elementwise(*a, &|gi, _, y| -gi * y * y),
            Op::Neg(a) => elementwise(*a, &|gi, _, _| -gi),
            Op::Scale(a, f) => elementwise(*a, &|gi, _, _| gi * f),
            Op::ClampMin(a, floor) => {
                elementwise(*a, &|gi, x, _| if x > *floor { gi } else { 0.0 })
            }
            Op::Reduce(a, kind, axis) => {
                let src = val(*a);
                let n_reduced = match axis {
                    None => src.numel(),
                    Some(ax) => src.shape()[*ax],
                };
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / n_reduced as f64,
                };
                let gd = g.data();
                let data: Vec<f64> = match (axis, src.rank()) {
                    (None, _) | (Some(_), 1) => vec![gd[0] * scale; src.numel()],
                    (Some(ax), _) => {
                        let (r, c) = src.dims2()?;
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            for j in 0..c {
                                d.push(scale * if *ax == 0 { gd[j] } else { gd[i] });
                            }
                        }
                        d
                    }
                };
                vec![(*a, Tensor::from_parts(src.shape().to_vec(), data))]
            }
            Op::SliceCols(a, start, end) => {
                let src = val(*a);
                let (r, c) = src.as_rows();
                let w = end - start;
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    data[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*a, Tensor::from_parts(src.shape().to_vec(), data))]
            }
            Op::Concat(parts) => {
                let (r, total) = g.as_rows();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, w) = val(p).as_rows();
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        res.push((p, Tensor::from_parts(val(p).shape().to_vec(), data)));
                    }
                    offset += w;
                }
                res
            }
            Op::PermuteCols(a, perm) => {
                let (r, c) = g.as_rows();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for (j, &p) in perm.iter().enumerate() {
                        data[i * c + p] += g.data()[i * c + j];
                    }
                }
                vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), data))]
            }
            Op::GatherRows(a, index) => {
                let src = val(*a);
                let (r, c) = src.dims2()?;
                let mut data = vec![0.0; r * c];
                for (i, &s) in index.iter().enumerate() {
                    for (o, x) in data[s * c..(s + 1) * c].iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                vec![(*a, Tensor::from_parts(vec![r, c], data))]
            }
            Op::SegmentSum(a, seg) => {
                let (_, c) = g.dims2()?;
                let mut data = Vec::with_capacity(seg.len() * c);
                for &s in seg.iter() {
                    data.extend_from_slice(g.row(s));
                }
                vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), data))]
            }
            Op::Reshape(a) => {
                vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec()))]
            }
        })
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = g.as_rows();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, x) in out.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
            *o += x;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &i in p {
        if i >= p.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}
