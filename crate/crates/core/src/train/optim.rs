use crate::error::{Error, Result};
use crate::nn::Module;

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, in the module's visit order.
    pub velocity: Vec<Vec<f64>>,
    /// Reject parameters that did not receive a gradient.
    pub strict: bool,
}

impl OptimizerState {
    pub fn new(module: &dyn Module, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = Vec::new();
        module.visit_params(&mut |p| velocity.push(vec![0.0; p.numel()]));
        OptimizerState { lr, momentum, weight_decay, velocity, strict: false }
    }

    /// `v <- momentum * v + (grad + weight_decay * p); p <- p - lr * v`, then
    /// clears every gradient. A missing gradient counts as zero unless the
    /// optimizer is strict.
    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        let (lr, mu, wd, strict) = (self.lr, self.momentum, self.weight_decay, self.strict);
        let velocity = &mut self.velocity;
        module.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let Some(v) = velocity.get_mut(i) else {
                err = Some(Error::Contract(format!("optimizer has {} buffers, module has more parameters", velocity.len())));
                return;
            };
            i += 1;
            if v.len() != p.numel() {
                err = Some(Error::Contract(format!("velocity for {} has {} entries, parameter has {}", p.name, v.len(), p.numel())));
                return;
            }
            if p.grad.is_none() && strict {
                err = Some(Error::Contract(format!("parameter {} has no gradient", p.name)));
                return;
            }
            let grad = p.grad.take();
            let values = p.value_mut();
            for (j, (vj, pj)) in v.iter_mut().zip(values.iter_mut()).enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                *vj = mu * *vj + (g + wd * *pj);
                *pj -= lr * *vj;
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != self.velocity.len() {
            return Err(Error::Contract(format!("optimizer has {} buffers, module has {i} parameters", self.velocity.len())));
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi * t / t_max)) / 2`.
pub fn cosine_lr(t: usize, t_max: usize, lr0: f64) -> Result<f64> {
    if t > t_max {
        return Err(Error::Contract(format!("epoch {t} beyond schedule length {t_max}")));
    }
    if t_max == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / t_max as f64).cos()))
}
