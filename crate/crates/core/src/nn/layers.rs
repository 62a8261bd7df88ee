use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Module;
use crate::autodiff::{BnMode, Param, Tape, Tensor};
use crate::error::{Error, Result};

/// How a layer's parameters enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Parameters with `requires_grad` become leaves.
    Trainable,
    /// Parameters enter as constants; nothing accumulates into them.
    Frozen,
}

pub(crate) fn bind(tape: &mut Tape, p: &Param, binding: Binding) -> Tensor {
    match binding {
        Binding::Trainable => tape.param(p),
        Binding::Frozen => tape.frozen(p),
    }
}

/// He (fan-in) normal initialization.
pub(crate) fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            he_normal(rng, fan_in, out_c * fan_in),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), &[out_c], vec![0.0; out_c]));
        Conv2d { weight, bias, stride, pad }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        ((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1)
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, binding: Binding) -> Result<Tensor> {
        let w = bind(tape, &self.weight, binding);
        let y = tape.conv2d(x, &w, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => {
                let b = bind(tape, b, binding);
                tape.add_channel_bias(&y, &b)
            }
            None => Ok(y),
        }
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Fully connected layer `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), &[input, output], he_normal(rng, input, input * output)),
            bias: Param::new(format!("{name}.bias"), &[output], vec![0.0; output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, binding: Binding) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::shape("linear", &[x.shape(), self.weight.shape()]));
        }
        let w = bind(tape, &self.weight, binding);
        let b = bind(tape, &self.bias, binding);
        let y = tape.matmul(x, &w)?;
        let b = tape.reshape(&b, &[1, self.output_dim()])?;
        tape.add_bcast(&y, &b)
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Per-channel batch normalization with running statistics for eval mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    name: String,
    running: RefCell<RunningStats>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), &[channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), &[channels], vec![0.0; channels]),
            name: name.to_string(),
            running: RefCell::new(RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn running_mean(&self) -> Vec<f64> {
        self.running.borrow().mean.clone()
    }

    pub fn running_var(&self) -> Vec<f64> {
        self.running.borrow().var.clone()
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, train: bool, binding: Binding) -> Result<Tensor> {
        let g = bind(tape, &self.gamma, binding);
        let b = bind(tape, &self.beta, binding);
        if train {
            let (y, stats) = tape.batch_norm(x, &g, &b, self.eps, BnMode::Batch)?;
            if let Some((mean, var)) = stats {
                let m = (x.numel() / x.shape()[1]) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let mut r = self.running.borrow_mut();
                let mo = self.momentum;
                for c in 0..mean.len() {
                    r.mean[c] = (1.0 - mo) * r.mean[c] + mo * mean[c];
                    r.var[c] = (1.0 - mo) * r.var[c] + mo * var[c] * unbias;
                }
            }
            Ok(y)
        } else {
            let r = self.running.borrow();
            let mode = BnMode::Fixed { mean: Arc::new(r.mean.clone()), var: Arc::new(r.var.clone()) };
            drop(r);
            tape.batch_norm(x, &g, &b, self.eps, mode).map(|(y, _)| y)
        }
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let r = self.running.borrow();
        f(&format!("{}.running_mean", self.name), &r.mean);
        f(&format!("{}.running_var", self.name), &r.var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        let r = self.running.get_mut();
        f(&format!("{}.running_mean", self.name), &mut r.mean);
        f(&format!("{}.running_var", self.name), &mut r.var);
    }
}

/// Normalization over the last axis with a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), &[dim], vec![1.0; dim]),
            beta: Param::new(format!("{name}.beta"), &[dim], vec![0.0; dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, binding: Binding) -> Result<Tensor> {
        let g = bind(tape, &self.gamma, binding);
        let b = bind(tape, &self.beta, binding);
        tape.layer_norm(x, &g, &b, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_zero_weights_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new(&mut rng, "l", 3, 2);
        lin.weight.value_mut().iter_mut().for_each(|v| *v = 0.0);
        lin.bias.value_mut().copy_from_slice(&[1.5, -2.0]);
        let mut tape = Tape::new();
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = lin.forward(&mut tape, &x, Binding::Trainable).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn batchnorm_train_updates_running_stats() {
        let bn = BatchNorm2d::new("bn", 1);
        let mut tape = Tape::new();
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let y = bn.forward(&mut tape, &x, true, Binding::Trainable).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // batch mean 4, unbiased var 20/3
        assert!((bn.running_mean()[0] - 0.4).abs() < 1e-12);
        assert!((bn.running_var()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_is_repeatable() {
        let bn = BatchNorm2d::new("bn", 2);
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 2, 1, 1], vec![0.5, -0.5]);
        let a = bn.forward(&mut tape, &x, false, Binding::Trainable).unwrap();
        let b = bn.forward(&mut tape, &x, false, Binding::Trainable).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(bn.running_mean(), vec![0.0, 0.0]);
    }
}
