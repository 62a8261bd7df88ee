use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Identifies a node on one particular tape generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// A dense row-major array of `f64` values.
///
/// Tensors are cheap to clone: the value buffer is shared. A tensor that is
/// recorded on a tape carries the node id; a tensor without one is a
/// constant as far as differentiation is concerned.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    /// Builds a constant tensor. Panics if `data.len()` disagrees with the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(numel(shape), data.len(), "tensor data does not match shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a logical parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable leaf: value buffer plus an optional accumulated gradient.
///
/// Clones keep the same [`ParamId`]; two clones refer to the same logical
/// parameter. Use [`Param::renew`] to give a copy its own identity.
#[derive(Clone, Debug)]
pub struct Param {
    pub(crate) id: ParamId,
    pub name: String,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Vec<f64>>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Self {
        assert_eq!(numel(shape), value.len());
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            shape: shape.to_vec(),
            value: Arc::new(value),
            grad: None,
            requires_grad: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.value), node: None }
    }

    pub fn renew(&mut self) {
        self.id = ParamId::fresh();
    }

    /// Adds `g` into the gradient slot. Parameters that do not require
    /// gradients never receive a buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
