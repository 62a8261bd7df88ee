use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeom, Mat};
use super::tensor::{numel, NodeId, Param, ParamId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Fixed { mean: Arc<Vec<f64>>, var: Arc<Vec<f64>> },
}

/// Differentiable primitives and their attributes.
#[derive(Clone, Debug)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    MatMul,
    BatchMatMul,
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    Relu,
    LeakyRelu(f64),
    Exp,
    Log,
    Sqrt,
    Square,
    ClampMin(f64),
    Sum { axes: Vec<usize>, keepdim: bool },
    Mean { axes: Vec<usize>, keepdim: bool },
    Expand(Vec<usize>),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    BatchNorm { eps: f64, mode: BnMode },
    LayerNorm { eps: f64 },
    L2Norm { axis: usize },
}

/// Discriminant of [`Prim`], used for op accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    MatMul,
    BatchMatMul,
    Conv2d,
    MaxPool2d,
    AvgPool2d,
    Relu,
    LeakyRelu,
    Exp,
    Log,
    Sqrt,
    Square,
    ClampMin,
    Sum,
    Mean,
    Expand,
    Reshape,
    Permute,
    Concat,
    Narrow,
    BatchNorm,
    LayerNorm,
    L2Norm,
}

impl Prim {
    pub fn kind(&self) -> OpKind {
        match self {
            Prim::Add => OpKind::Add,
            Prim::Sub => OpKind::Sub,
            Prim::Mul => OpKind::Mul,
            Prim::Div => OpKind::Div,
            Prim::AddScalar(_) => OpKind::AddScalar,
            Prim::MulScalar(_) => OpKind::MulScalar,
            Prim::MatMul => OpKind::MatMul,
            Prim::BatchMatMul => OpKind::BatchMatMul,
            Prim::Conv2d { .. } => OpKind::Conv2d,
            Prim::MaxPool2d { .. } => OpKind::MaxPool2d,
            Prim::AvgPool2d { .. } => OpKind::AvgPool2d,
            Prim::Relu => OpKind::Relu,
            Prim::LeakyRelu(_) => OpKind::LeakyRelu,
            Prim::Exp => OpKind::Exp,
            Prim::Log => OpKind::Log,
            Prim::Sqrt => OpKind::Sqrt,
            Prim::Square => OpKind::Square,
            Prim::ClampMin(_) => OpKind::ClampMin,
            Prim::Sum { .. } => OpKind::Sum,
            Prim::Mean { .. } => OpKind::Mean,
            Prim::Expand(_) => OpKind::Expand,
            Prim::Reshape(_) => OpKind::Reshape,
            Prim::Permute(_) => OpKind::Permute,
            Prim::Concat { .. } => OpKind::Concat,
            Prim::Narrow { .. } => OpKind::Narrow,
            Prim::BatchNorm { .. } => OpKind::BatchNorm,
            Prim::LayerNorm { .. } => OpKind::LayerNorm,
            Prim::L2Norm { .. } => OpKind::L2Norm,
        }
    }

    fn name(&self) -> &'static str {
        match self.kind() {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "bmm",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::ClampMin => "clamp_min",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Expand => "expand",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::BatchNorm => "batch_norm",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Norm => "l2_norm",
        }
    }
}

/// Values saved by a forward pass beyond the inputs and output.
#[derive(Debug)]
enum Extra {
    None,
    Indices(Vec<usize>),
    Geom(ConvGeom),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum NodeKind {
    Leaf,
    Op { prim: Prim, inputs: Vec<Option<usize>>, saved: Vec<Tensor>, out: Arc<Vec<f64>>, extra: Extra },
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
}

/// Result of a forward evaluation before it is recorded.
struct Forward {
    shape: Vec<usize>,
    data: Vec<f64>,
    extra: Extra,
}

/// Dynamically built reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted. A tape is owned by one thread; build a fresh one
/// (or [`Tape::clear`]) for every step.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Tensor>,
    leaf_params: Vec<(usize, ParamId)>,
    counts: HashMap<OpKind, usize>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
            leaf_params: Vec::new(),
            counts: HashMap::new(),
            strict: false,
        }
    }

    /// A tape that rejects any non-finite primitive output.
    pub fn strict() -> Self {
        Tape { strict: true, ..Tape::new() }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// Drops every node. Tensors recorded before the call become stale.
    pub fn clear(&mut self) {
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
        self.nodes.clear();
        self.bound.clear();
        self.leaf_params.clear();
        self.counts.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of primitive applications of `kind` since the tape was
    /// created or cleared (recorded or not).
    pub fn op_count(&self, kind: OpKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    fn push_leaf(&mut self) -> NodeId {
        self.nodes.push(Node { kind: NodeKind::Leaf });
        NodeId { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Records a gradient-requiring leaf holding `data`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Tensor {
        let mut t = Tensor::new(shape, data);
        t.node = Some(self.push_leaf());
        t
    }

    /// Turns a constant's values into a fresh leaf on this tape.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let mut out = t.detach();
        out.node = Some(self.push_leaf());
        out
    }

    /// Binds a parameter. Trainable parameters become leaves (one per tape,
    /// however often they are bound); others become constants.
    pub fn param(&mut self, p: &Param) -> Tensor {
        if !p.requires_grad {
            return p.as_tensor();
        }
        if let Some(t) = self.bound.get(&p.id) {
            return t.clone();
        }
        let mut t = p.as_tensor();
        let node = self.push_leaf();
        t.node = Some(node);
        self.leaf_params.push((node.index, p.id));
        self.bound.insert(p.id, t.clone());
        t
    }

    /// Binds a parameter as a constant regardless of its `requires_grad`.
    pub fn frozen(&mut self, p: &Param) -> Tensor {
        p.as_tensor()
    }

    fn check_node(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(n) if n.tape == self.id && n.index < self.nodes.len() => Ok(Some(n.index)),
            Some(_) => Err(Error::Contract("tensor belongs to a different or cleared tape".into())),
        }
    }

    /// Applies a primitive. A node is recorded iff some input requires grad.
    pub fn apply(&mut self, prim: Prim, inputs: &[&Tensor]) -> Result<Tensor> {
        self.apply_with_stats(prim, inputs).map(|(t, _)| t)
    }

    /// Batch normalization that also returns the batch mean and biased
    /// variance when normalizing with batch statistics.
    pub fn batch_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
        mode: BnMode,
    ) -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
        let batch = matches!(mode, BnMode::Batch);
        let (t, stats) = self.apply_with_stats(Prim::BatchNorm { eps, mode }, &[x, gamma, beta])?;
        Ok((t, if batch { stats } else { None }))
    }

    fn apply_with_stats(&mut self, prim: Prim, inputs: &[&Tensor]) -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
        *self.counts.entry(prim.kind()).or_insert(0) += 1;
        let fwd = forward(&prim, inputs)?;
        if self.strict && fwd.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault { what: prim.name().to_string() });
        }
        let mut node_inputs = Vec::with_capacity(inputs.len());
        for t in inputs {
            node_inputs.push(self.check_node(t)?);
        }
        let stats = match &fwd.extra {
            Extra::BatchNorm { mean, var, .. } => Some((mean.clone(), var.clone())),
            _ => None,
        };
        let data = Arc::new(fwd.data);
        let mut out = Tensor { shape: fwd.shape.clone(), data: Arc::clone(&data), node: None };
        if node_inputs.iter().any(Option::is_some) {
            self.nodes.push(Node {
                kind: NodeKind::Op {
                    prim,
                    inputs: node_inputs,
                    saved: inputs.iter().map(|t| t.detach()).collect(),
                    out: data,
                    extra: fwd.extra,
                },
            });
            out.node = Some(NodeId { tape: self.id, index: self.nodes.len() - 1 });
        }
        Ok((out, stats))
    }

    /// Reverse pass from a single-element tensor.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!("backward on non-scalar of shape {:?}", loss.shape)));
        }
        let root = self
            .check_node(loss)?
            .ok_or_else(|| Error::Contract("backward on a tensor without a tape node".into()))?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].kind {
                NodeKind::Leaf => {
                    leaves.insert(i, g);
                }
                NodeKind::Op { prim, inputs, saved, out, extra } => {
                    let need: Vec<bool> = inputs.iter().map(Option::is_some).collect();
                    let gin = vjp(prim, saved, out, extra, &g, &need);
                    for (slot, gi) in inputs.iter().zip(gin) {
                        if let (Some(j), Some(gi)) = (slot, gi) {
                            match &mut grads[*j] {
                                Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                                empty => *empty = Some(gi),
                            }
                        }
                    }
                }
            }
        }
        let params = self
            .leaf_params
            .iter()
            .filter_map(|(idx, pid)| leaves.get(idx).map(|_| (*pid, *idx)))
            .collect();
        Ok(Gradients { tape: self.id, leaves, params })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf was unreachable or `t` is
    /// not a leaf of this tape.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let n = t.node?;
        if n.tape != self.tape {
            return None;
        }
        self.leaves.get(&n.index).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|i| self.leaves.get(i)).map(Vec::as_slice)
    }

    /// Accumulates this tape's gradient for `p` into its grad slot.
    pub fn accumulate(&self, p: &mut Param) {
        if let Some(g) = self.param(p.id) {
            p.accumulate_grad(g);
        }
    }
}

// ---------------------------------------------------------------------------
// forward kernels

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &[&a.shape, &b.shape]));
    }
    Ok(())
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Forward {
    Forward { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect(), extra: Extra::None }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Forward> {
    same_shape(op, a, b)?;
    Ok(Forward {
        shape: a.shape.clone(),
        data: a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect(),
        extra: Extra::None,
    })
}

fn reduce_strides(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
    let ks = kernels::strides(&kept);
    let src: Vec<usize> = (0..shape.len()).map(|i| if axes.contains(&i) { 0 } else { ks[i] }).collect();
    (kept, src)
}

fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut a = axes.to_vec();
    a.sort_unstable();
    a.dedup();
    if a.iter().any(|&x| x >= shape.len()) {
        return Err(Error::shape(op, &[shape, axes]));
    }
    Ok(a)
}

fn pool_geom(op: &'static str, x: &Tensor, kernel: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || kernel == 0 || stride == 0 || x.shape[2] < kernel || x.shape[3] < kernel {
        return Err(Error::shape(op, &[&x.shape, &[kernel, stride]]));
    }
    let (bc, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    Ok((bc, h, w, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
}

fn forward(prim: &Prim, inputs: &[&Tensor]) -> Result<Forward> {
    let name = prim.name();
    let arity = match prim {
        Prim::Concat { .. } => inputs.len().max(1),
        Prim::Add | Prim::Sub | Prim::Mul | Prim::Div | Prim::MatMul | Prim::BatchMatMul | Prim::Conv2d { .. } => 2,
        Prim::BatchNorm { .. } | Prim::LayerNorm { .. } => 3,
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(Error::Contract(format!("{name} expects {arity} inputs, got {}", inputs.len())));
    }
    let x = inputs[0];
    Ok(match prim {
        Prim::Add => binary(name, x, inputs[1], |a, b| a + b)?,
        Prim::Sub => binary(name, x, inputs[1], |a, b| a - b)?,
        Prim::Mul => binary(name, x, inputs[1], |a, b| a * b)?,
        Prim::Div => binary(name, x, inputs[1], |a, b| a / b)?,
        Prim::AddScalar(c) => unary(x, |v| v + c),
        Prim::MulScalar(c) => unary(x, |v| v * c),
        Prim::Relu => unary(x, |v| if v > 0.0 { v } else { 0.0 }),
        Prim::LeakyRelu(s) => unary(x, |v| if v > 0.0 { v } else { s * v }),
        Prim::Exp => unary(x, f64::exp),
        Prim::Log => unary(x, f64::ln),
        Prim::Sqrt => unary(x, f64::sqrt),
        Prim::Square => unary(x, |v| v * v),
        Prim::ClampMin(c) => unary(x, |v| if v > *c { v } else { *c }),
        Prim::MatMul => {
            let b = inputs[1];
            if x.rank() != 2 || b.rank() != 2 || x.shape[1] != b.shape[0] {
                return Err(Error::shape(name, &[&x.shape, &b.shape]));
            }
            let (m, k, n) = (x.shape[0], x.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, 1.0, &x.data, Mat::row_major(k), &b.data, Mat::row_major(n), 0.0, &mut out, Mat::row_major(n));
            Forward { shape: vec![m, n], data: out, extra: Extra::None }
        }
        Prim::BatchMatMul => {
            let b = inputs[1];
            if x.rank() != 3 || b.rank() != 3 || x.shape[0] != b.shape[0] || x.shape[2] != b.shape[1] {
                return Err(Error::shape(name, &[&x.shape, &b.shape]));
            }
            let (bs, m, k, n) = (x.shape[0], x.shape[1], x.shape[2], b.shape[2]);
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                kernels::gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &x.data[i * m * k..],
                    Mat::row_major(k),
                    &b.data[i * k * n..],
                    Mat::row_major(n),
                    0.0,
                    &mut out[i * m * n..],
                    Mat::row_major(n),
                );
            }
            Forward { shape: vec![bs, m, n], data: out, extra: Extra::None }
        }
        Prim::Conv2d { stride, pad } => {
            let w = inputs[1];
            if x.rank() != 4 || w.rank() != 4 || x.shape[1] != w.shape[1] || *stride == 0 {
                return Err(Error::shape(name, &[&x.shape, &w.shape]));
            }
            let (hp, wp) = (x.shape[2] + 2 * pad, x.shape[3] + 2 * pad);
            if hp < w.shape[2] || wp < w.shape[3] {
                return Err(Error::shape(name, &[&x.shape, &w.shape]));
            }
            let g = ConvGeom {
                batch: x.shape[0],
                in_c: x.shape[1],
                in_h: x.shape[2],
                in_w: x.shape[3],
                out_c: w.shape[0],
                kh: w.shape[2],
                kw: w.shape[3],
                stride: *stride,
                pad: *pad,
                out_h: (hp - w.shape[2]) / stride + 1,
                out_w: (wp - w.shape[3]) / stride + 1,
            };
            let data = kernels::conv_forward(&x.data, &w.data, &g);
            Forward { shape: vec![g.batch, g.out_c, g.out_h, g.out_w], data, extra: Extra::Geom(g) }
        }
        Prim::MaxPool2d { kernel, stride } => {
            let (bc, h, w, oh, ow) = pool_geom(name, x, *kernel, *stride)?;
            let mut out = Vec::with_capacity(bc * oh * ow);
            let mut arg = Vec::with_capacity(bc * oh * ow);
            for p in 0..bc {
                let plane = &x.data[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        // row-major scan with strict comparison: ties go to the first index
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = oy * stride * w + ox * stride;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                let i = (oy * stride + ky) * w + ox * stride + kx;
                                if plane[i] > best {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(plane[best_i]);
                        arg.push(p * h * w + best_i);
                    }
                }
            }
            Forward { shape: vec![x.shape[0], x.shape[1], oh, ow], data: out, extra: Extra::Indices(arg) }
        }
        Prim::AvgPool2d { kernel, stride } => {
            let (bc, h, w, oh, ow) = pool_geom(name, x, *kernel, *stride)?;
            let scale = 1.0 / (kernel * kernel) as f64;
            let mut out = Vec::with_capacity(bc * oh * ow);
            for p in 0..bc {
                let plane = &x.data[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                s += plane[(oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                        out.push(s * scale);
                    }
                }
            }
            Forward { shape: vec![x.shape[0], x.shape[1], oh, ow], data: out, extra: Extra::None }
        }
        Prim::Sum { axes, keepdim } | Prim::Mean { axes, keepdim } => {
            let axes = check_axes(name, &x.shape, axes)?;
            let (kept, src) = reduce_strides(&x.shape, &axes);
            let idx = kernels::gather_index(&x.shape, &src);
            let mut out = vec![0.0; numel(&kept)];
            for (&i, &v) in idx.iter().zip(x.data.iter()) {
                out[i] += v;
            }
            if matches!(prim, Prim::Mean { .. }) {
                let count = (x.numel() / out.len().max(1)) as f64;
                out.iter_mut().for_each(|v| *v /= count);
            }
            let shape = if *keepdim {
                kept
            } else {
                let s: Vec<usize> = x.shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
                if s.is_empty() {
                    vec![1]
                } else {
                    s
                }
            };
            Forward { shape, data: out, extra: Extra::None }
        }
        Prim::Expand(target) => {
            if target.len() != x.rank() || x.shape.iter().zip(target).any(|(&s, &t)| s != t && s != 1) {
                return Err(Error::shape(name, &[&x.shape, target]));
            }
            let st = kernels::strides(&x.shape);
            let src: Vec<usize> = (0..x.rank()).map(|i| if x.shape[i] == 1 { 0 } else { st[i] }).collect();
            let idx = kernels::gather_index(target, &src);
            Forward { shape: target.clone(), data: idx.iter().map(|&i| x.data[i]).collect(), extra: Extra::None }
        }
        Prim::Reshape(shape) => {
            if numel(shape) != x.numel() {
                return Err(Error::shape(name, &[&x.shape, shape]));
            }
            Forward { shape: shape.clone(), data: x.data.as_ref().clone(), extra: Extra::None }
        }
        Prim::Permute(perm) => {
            let mut seen = perm.clone();
            seen.sort_unstable();
            if perm.len() != x.rank() || seen.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(Error::shape(name, &[&x.shape, perm]));
            }
            let st = kernels::strides(&x.shape);
            let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
            let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
            let idx = kernels::gather_index(&shape, &src);
            Forward { shape, data: idx.iter().map(|&i| x.data[i]).collect(), extra: Extra::None }
        }
        Prim::Concat { axis } => {
            let r = x.rank();
            if *axis >= r
                || inputs.iter().any(|t| t.rank() != r || (0..r).any(|d| d != *axis && t.shape[d] != x.shape[d]))
            {
                let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape.as_slice()).collect();
                return Err(Error::shape(name, &shapes));
            }
            let mut shape = x.shape.clone();
            shape[*axis] = inputs.iter().map(|t| t.shape[*axis]).sum();
            let outer: usize = x.shape[..*axis].iter().product();
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for t in inputs {
                    let chunk: usize = t.shape[*axis..].iter().product();
                    data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                }
            }
            Forward { shape, data, extra: Extra::None }
        }
        Prim::Narrow { axis, start, len } => {
            if *axis >= x.rank() || start + len > x.shape[*axis] || *len == 0 {
                return Err(Error::shape(name, &[&x.shape, &[*axis, *start, *len]]));
            }
            let outer: usize = x.shape[..*axis].iter().product();
            let inner: usize = x.shape[axis + 1..].iter().product();
            let mut shape = x.shape.clone();
            shape[*axis] = *len;
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                let base = o * x.shape[*axis] * inner + start * inner;
                data.extend_from_slice(&x.data[base..base + len * inner]);
            }
            Forward { shape, data, extra: Extra::None }
        }
        Prim::BatchNorm { eps, mode } => {
            let (gamma, beta) = (inputs[1], inputs[2]);
            if !(x.rank() == 2 || x.rank() == 4) || gamma.shape != [x.shape[1]] || beta.shape != gamma.shape {
                return Err(Error::shape(name, &[&x.shape, &gamma.shape, &beta.shape]));
            }
            let (b, c) = (x.shape[0], x.shape[1]);
            let hw = if x.rank() == 4 { x.shape[2] * x.shape[3] } else { 1 };
            let m = (b * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            match mode {
                BnMode::Batch => {
                    for bi in 0..b {
                        for ch in 0..c {
                            let s: f64 = x.data[(bi * c + ch) * hw..][..hw].iter().sum();
                            mean[ch] += s;
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m);
                    for bi in 0..b {
                        for ch in 0..c {
                            let mu = mean[ch];
                            let s: f64 = x.data[(bi * c + ch) * hw..][..hw].iter().map(|v| (v - mu) * (v - mu)).sum();
                            var[ch] += s;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m);
                }
                BnMode::Fixed { mean: rm, var: rv } => {
                    if rm.len() != c || rv.len() != c {
                        return Err(Error::shape(name, &[&x.shape, &[rm.len(), rv.len()]]));
                    }
                    mean.copy_from_slice(rm);
                    var.copy_from_slice(rv);
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        let h = (x.data[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = h;
                        out[i] = h * gamma.data[ch] + beta.data[ch];
                    }
                }
            }
            Forward { shape: x.shape.clone(), data: out, extra: Extra::BatchNorm { xhat, inv_std, mean, var } }
        }
        Prim::LayerNorm { eps } => {
            let (gamma, beta) = (inputs[1], inputs[2]);
            let d = *x.shape.last().unwrap_or(&0);
            if d == 0 || gamma.shape != [d] || beta.shape != [d] {
                return Err(Error::shape(name, &[&x.shape, &gamma.shape, &beta.shape]));
            }
            let rows = x.numel() / d;
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for i in 0..d {
                    let h = (row[i] - mu) * is;
                    xhat[r * d + i] = h;
                    out[r * d + i] = h * gamma.data[i] + beta.data[i];
                }
            }
            Forward { shape: x.shape.clone(), data: out, extra: Extra::Norm { xhat, inv_std } }
        }
        Prim::L2Norm { axis } => {
            if *axis >= x.rank() {
                return Err(Error::shape(name, &[&x.shape, &[*axis]]));
            }
            let (kept, src) = reduce_strides(&x.shape, &[*axis]);
            let idx = kernels::gather_index(&x.shape, &src);
            let mut out = vec![0.0; numel(&kept)];
            for (&i, &v) in idx.iter().zip(x.data.iter()) {
                out[i] += v * v;
            }
            out.iter_mut().for_each(|v| *v = v.sqrt());
            Forward { shape: kept, data: out, extra: Extra::Indices(idx) }
        }
    })
}

// ---------------------------------------------------------------------------
// vector-Jacobian products

fn vjp(prim: &Prim, saved: &[Tensor], out: &[f64], extra: &Extra, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let x = &saved[0];
    let map1 = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> { vec![Some((0..g.len()).map(f).collect())] };
    match prim {
        Prim::Add => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())],
        Prim::Sub => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.iter().map(|v| -v).collect())],
        Prim::Mul => {
            let (a, b) = (&x.data, &saved[1].data);
            vec![
                need[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                need[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
            ]
        }
        Prim::Div => {
            let (a, b) = (&x.data, &saved[1].data);
            vec![
                need[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| g / b).collect()),
                need[1].then(|| (0..g.len()).map(|i| -g[i] * a[i] / (b[i] * b[i])).collect()),
            ]
        }
        Prim::AddScalar(_) => vec![Some(g.to_vec())],
        Prim::MulScalar(c) => map1(&|i| g[i] * c),
        Prim::Relu => map1(&|i| if out[i] > 0.0 { g[i] } else { 0.0 }),
        Prim::LeakyRelu(s) => map1(&|i| if x.data[i] > 0.0 { g[i] } else { s * g[i] }),
        Prim::Exp => map1(&|i| g[i] * out[i]),
        Prim::Log => map1(&|i| g[i] / x.data[i]),
        Prim::Sqrt => map1(&|i| g[i] / (2.0 * out[i])),
        Prim::Square => map1(&|i| 2.0 * x.data[i] * g[i]),
        Prim::ClampMin(c) => map1(&|i| if x.data[i] > *c { g[i] } else { 0.0 }),
        Prim::MatMul => {
            let b = &saved[1];
            let (m, k, n) = (x.shape[0], x.shape[1], b.shape[1]);
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, 1.0, g, Mat::row_major(n), &b.data, Mat::transposed(n), 0.0, &mut ga, Mat::row_major(k));
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, 1.0, &x.data, Mat::transposed(k), g, Mat::row_major(n), 0.0, &mut gb, Mat::row_major(n));
                gb
            });
            vec![ga, gb]
        }
        Prim::BatchMatMul => {
            let b = &saved[1];
            let (bs, m, k, n) = (x.shape[0], x.shape[1], x.shape[2], b.shape[2]);
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g[i * m * n..],
                        Mat::row_major(n),
                        &b.data[i * k * n..],
                        Mat::transposed(n),
                        0.0,
                        &mut ga[i * m * k..],
                        Mat::row_major(k),
                    );
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &x.data[i * m * k..],
                        Mat::transposed(k),
                        &g[i * m * n..],
                        Mat::row_major(n),
                        0.0,
                        &mut gb[i * k * n..],
                        Mat::row_major(n),
                    );
                }
                gb
            });
            vec![ga, gb]
        }
        Prim::Conv2d { .. } => {
            let Extra::Geom(geom) = extra else { unreachable!("conv2d without geometry") };
            let (dx, dw) = kernels::conv_backward(&x.data, &saved[1].data, g, geom, need[0], need[1]);
            vec![dx, dw]
        }
        Prim::MaxPool2d { .. } => {
            let Extra::Indices(arg) = extra else { unreachable!("max_pool2d without indices") };
            let mut dx = vec![0.0; x.numel()];
            for (&i, &gv) in arg.iter().zip(g) {
                dx[i] += gv;
            }
            vec![Some(dx)]
        }
        Prim::AvgPool2d { kernel, stride } => {
            let (h, w) = (x.shape[2], x.shape[3]);
            let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
            let scale = 1.0 / (kernel * kernel) as f64;
            let mut dx = vec![0.0; x.numel()];
            for p in 0..x.shape[0] * x.shape[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(p * oh + oy) * ow + ox] * scale;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                dx[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        Prim::Sum { axes, .. } | Prim::Mean { axes, .. } => {
            let mut axes = axes.clone();
            axes.sort_unstable();
            axes.dedup();
            let (kept, src) = reduce_strides(&x.shape, &axes);
            let idx = kernels::gather_index(&x.shape, &src);
            let scale = if matches!(prim, Prim::Mean { .. }) { numel(&kept) as f64 / x.numel() as f64 } else { 1.0 };
            vec![Some(idx.iter().map(|&i| g[i] * scale).collect())]
        }
        Prim::Expand(target) => {
            let st = kernels::strides(&x.shape);
            let src: Vec<usize> = (0..x.rank()).map(|i| if x.shape[i] == 1 { 0 } else { st[i] }).collect();
            let idx = kernels::gather_index(target, &src);
            let mut dx = vec![0.0; x.numel()];
            for (&i, &gv) in idx.iter().zip(g) {
                dx[i] += gv;
            }
            vec![Some(dx)]
        }
        Prim::Reshape(_) => vec![Some(g.to_vec())],
        Prim::Permute(perm) => {
            let st = kernels::strides(&x.shape);
            let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
            let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
            let idx = kernels::gather_index(&shape, &src);
            let mut dx = vec![0.0; x.numel()];
            for (&i, &gv) in idx.iter().zip(g) {
                dx[i] = gv;
            }
            vec![Some(dx)]
        }
        Prim::Concat { axis } => {
            let outer: usize = x.shape[..*axis].iter().product();
            let total: usize = saved.iter().map(|t| t.shape[*axis..].iter().product::<usize>()).sum();
            let mut off = 0;
            saved
                .iter()
                .zip(need)
                .map(|(t, &n)| {
                    let chunk: usize = t.shape[*axis..].iter().product();
                    let r = n.then(|| {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + off..o * total + off + chunk]);
                        }
                        d
                    });
                    off += chunk;
                    r
                })
                .collect()
        }
        Prim::Narrow { axis, start, len } => {
            let outer: usize = x.shape[..*axis].iter().product();
            let inner: usize = x.shape[axis + 1..].iter().product();
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = o * x.shape[*axis] * inner + start * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }
        Prim::BatchNorm { mode, .. } => {
            let Extra::BatchNorm { xhat, inv_std, .. } = extra else { unreachable!("batch_norm without saved stats") };
            let gamma = &saved[1].data;
            let (b, c) = (x.shape[0], x.shape[1]);
            let hw = x.numel() / (b * c);
            let m = (b * hw) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; x.numel()];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let k = gamma[ch] * inv_std[ch];
                        for i in off..off + hw {
                            dx[i] = match mode {
                                BnMode::Batch => k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m),
                                BnMode::Fixed { .. } => k * g[i],
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
        }
        Prim::LayerNorm { .. } => {
            let Extra::Norm { xhat, inv_std } = extra else { unreachable!("layer_norm without saved stats") };
            let gamma = &saved[1].data;
            let d = gamma.len();
            let rows = x.numel() / d;
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut dx = vec![0.0; x.numel()];
            for r in 0..rows {
                let (mut s1, mut s2) = (0.0, 0.0);
                for i in 0..d {
                    let gi = g[r * d + i];
                    dgamma[i] += gi * xhat[r * d + i];
                    dbeta[i] += gi;
                    let dh = gi * gamma[i];
                    s1 += dh;
                    s2 += dh * xhat[r * d + i];
                }
                let (s1, s2) = (s1 / d as f64, s2 / d as f64);
                for i in 0..d {
                    let dh = g[r * d + i] * gamma[i];
                    dx[r * d + i] = inv_std[r] * (dh - s1 - xhat[r * d + i] * s2);
                }
            }
            vec![need[0].then_some(dx), need[1].then_some(dgamma), need[2].then_some(dbeta)]
        }
        Prim::L2Norm { .. } => {
            let Extra::Indices(idx) = extra else { unreachable!("l2_norm without indices") };
            // zero-norm slices get a zero subgradient
            vec![Some(
                idx.iter()
                    .zip(x.data.iter())
                    .map(|(&o, &v)| if out[o] > 0.0 { g[o] * v / out[o] } else { 0.0 })
                    .collect(),
            )]
        }
    }
}
