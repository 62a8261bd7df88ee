//! Named wrappers over [`Tape::apply`] plus a few composite helpers.

use super::tape::{Prim, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl Tape {
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Add, &[a, b])
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Mul, &[a, b])
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Div, &[a, b])
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Prim::AddScalar(c), &[a])
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Prim::MulScalar(c), &[a])
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.mul_scalar(a, -1.0)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Prim::MatMul, &[a, b])
    }

    pub fn bmm(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Prim::BatchMatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        self.apply(Prim::Conv2d { stride, pad }, &[x, w])
    }

    pub fn max_pool2d(&mut self, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        self.apply(Prim::MaxPool2d { kernel, stride }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        self.apply(Prim::AvgPool2d { kernel, stride }, &[x])
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Result<Tensor> {
        self.apply(Prim::LeakyRelu(slope), &[x])
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Exp, &[x])
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Log, &[x])
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Sqrt, &[x])
    }

    pub fn square(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Prim::Square, &[x])
    }

    pub fn clamp_min(&mut self, x: &Tensor, floor: f64) -> Result<Tensor> {
        self.apply(Prim::ClampMin(floor), &[x])
    }

    pub fn sum(&mut self, x: &Tensor, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.apply(Prim::Sum { axes: axes.to_vec(), keepdim }, &[x])
    }

    pub fn mean(&mut self, x: &Tensor, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.apply(Prim::Mean { axes: axes.to_vec(), keepdim }, &[x])
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let axes: Vec<usize> = (0..x.rank()).collect();
        self.sum(x, &axes, false)
    }

    /// Mean of every element, shape `[1]`.
    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let axes: Vec<usize> = (0..x.rank()).collect();
        self.mean(x, &axes, false)
    }

    pub fn expand(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if x.shape() == shape {
            return Ok(x.clone());
        }
        self.apply(Prim::Expand(shape.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(Prim::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.apply(Prim::Permute(axes.to_vec()), &[x])
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::shape("transpose", &[x.shape()]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Prim::Concat { axis }, xs)
    }

    pub fn narrow(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.apply(Prim::Narrow { axis, start, len }, &[x])
    }

    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.apply(Prim::LayerNorm { eps }, &[x, gamma, beta])
    }

    /// Euclidean norm along `axis`, kept as a size-1 axis.
    pub fn l2_norm(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Prim::L2Norm { axis }, &[x])
    }

    /// `x * s` with `s` broadcast from size-1 axes.
    pub fn mul_bcast(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let s = self.expand(s, x.shape())?;
        self.mul(x, &s)
    }

    /// `x / s` with `s` broadcast from size-1 axes.
    pub fn div_bcast(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let s = self.expand(s, x.shape())?;
        self.div(x, &s)
    }

    /// `x + s` with `s` broadcast from size-1 axes.
    pub fn add_bcast(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let s = self.expand(s, x.shape())?;
        self.add(x, &s)
    }

    /// `x - s` with `s` broadcast from size-1 axes.
    pub fn sub_bcast(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let s = self.expand(s, x.shape())?;
        self.sub(x, &s)
    }

    /// Adds a bias vector of length `shape[1]` to a `(B, C, ...)` tensor.
    pub fn add_channel_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if bias.shape() != [c] {
            return Err(Error::shape("add_channel_bias", &[x.shape(), bias.shape()]));
        }
        let mut bshape = vec![1; x.rank()];
        bshape[1] = c;
        let b = self.reshape(bias, &bshape)?;
        self.add_bcast(x, &b)
    }

    /// Row-wise log-softmax of a `(B, C)` matrix. The row maximum is
    /// subtracted as a constant; the result does not depend on it.
    pub fn log_softmax(&mut self, logits: &Tensor) -> Result<Tensor> {
        if logits.rank() != 2 {
            return Err(Error::shape("log_softmax", &[logits.shape()]));
        }
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let maxes: Vec<f64> = logits
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let m = Tensor::new(&[b, 1], maxes);
        let shifted = self.sub_bcast(logits, &m)?;
        let e = self.exp(&shifted)?;
        let s = self.sum(&e, &[1], true)?;
        let lse = self.log(&s)?;
        self.sub_bcast(&shifted, &lse)
    }

    /// Row-wise softmax of a `(B, C)` matrix.
    pub fn softmax(&mut self, logits: &Tensor) -> Result<Tensor> {
        if logits.rank() != 2 {
            return Err(Error::shape("softmax", &[logits.shape()]));
        }
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let maxes: Vec<f64> = logits
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let m = Tensor::new(&[b, 1], maxes);
        let shifted = self.sub_bcast(logits, &m)?;
        let e = self.exp(&shifted)?;
        let s = self.sum(&e, &[1], true)?;
        self.div_bcast(&e, &s)
    }
}
