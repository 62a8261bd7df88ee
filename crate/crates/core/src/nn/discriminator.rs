use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{bind, Binding, LayerNorm, Linear};
use super::{delegate_module, Module};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// How the conditioning image enters the critic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Flattened pixels.
    Flatten,
    /// Pixels average-pooled with the given window, then flattened.
    AvgPool(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub classes: usize,
    pub image_shape: [usize; 3],
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub conditioning: Conditioning,
}

impl DiscriminatorSpec {
    /// Three hidden layers of width 256 and leaky slope 0.2.
    pub fn standard(classes: usize, image_shape: [usize; 3]) -> Self {
        DiscriminatorSpec { classes, image_shape, hidden: vec![256, 256, 256], slope: 0.2, conditioning: Conditioning::Flatten }
    }

    pub fn condition_dim(&self) -> usize {
        let [c, h, w] = self.image_shape;
        match self.conditioning {
            Conditioning::Flatten => c * h * w,
            Conditioning::AvgPool(k) => c * (h / k) * (w / k),
        }
    }
}

#[derive(Clone, Debug)]
struct HiddenLayer {
    linear: Linear,
    norm: LayerNorm,
}

delegate_module!(HiddenLayer => linear, norm);

/// Fully connected Wasserstein critic `D(p | I)`: blocks of
/// linear, layer norm and leaky ReLU, then a linear map to one unbounded
/// score per sample.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    hidden: Vec<HiddenLayer>,
    pub out: Linear,
}

delegate_module!(Discriminator => hidden, out);

/// Values kept from a decomposed forward pass for the input-gradient chain.
struct LayerTrace {
    xhat: Tensor,
    sigma: Tensor,
    mask: Tensor,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        if spec.classes == 0 || spec.hidden.contains(&0) {
            return Err(Error::Config("discriminator dimensions must be positive".into()));
        }
        if let Conditioning::AvgPool(k) = spec.conditioning {
            if k == 0 || spec.image_shape[1] < k || spec.image_shape[2] < k {
                return Err(Error::Config(format!("conditioning pool window {k} does not fit the image")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut width = spec.classes + spec.condition_dim();
        let hidden = spec
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let layer = HiddenLayer {
                    linear: Linear::new(&mut rng, &format!("disc.{i}.linear"), width, h),
                    norm: LayerNorm::new(&format!("disc.{i}.norm"), h),
                };
                width = h;
                layer
            })
            .collect();
        let out = Linear::new(&mut rng, "disc.out", width, 1);
        Ok(Discriminator { spec, hidden, out })
    }

    fn check(&self, p: &Tensor, image: &Tensor) -> Result<()> {
        let s = &self.spec;
        if p.rank() != 2 || p.shape()[1] != s.classes || image.rank() != 4 || image.shape()[0] != p.shape()[0] || image.shape()[1..] != s.image_shape {
            return Err(Error::shape("discriminator", &[p.shape(), image.shape()]));
        }
        Ok(())
    }

    fn condition(&self, tape: &mut Tape, image: &Tensor) -> Result<Tensor> {
        let b = image.shape()[0];
        let img = match self.spec.conditioning {
            Conditioning::Flatten => image.clone(),
            Conditioning::AvgPool(k) => tape.avg_pool2d(image, k, k)?,
        };
        tape.reshape(&img, &[b, self.spec.condition_dim()])
    }

    /// Scores of shape `(B,)`.
    pub fn forward(&self, tape: &mut Tape, p: &Tensor, image: &Tensor, binding: Binding) -> Result<Tensor> {
        self.check(p, image)?;
        let b = p.shape()[0];
        let cond = self.condition(tape, image)?;
        let mut h = tape.concat(&[p, &cond], 1)?;
        for layer in &self.hidden {
            h = layer.linear.forward(tape, &h, binding)?;
            h = layer.norm.forward(tape, &h, binding)?;
            h = tape.leaky_relu(&h, self.spec.slope)?;
        }
        let s = self.out.forward(tape, &h, binding)?;
        tape.reshape(&s, &[b])
    }

    /// `dD(p|I)/dp` of shape `(B, classes)` as an explicit expression on the
    /// tape, so penalties built from it are differentiable with respect to
    /// the critic parameters. Leaky-ReLU slopes enter as constant masks;
    /// the layer-norm Jacobian is exact.
    pub fn input_grad(&self, tape: &mut Tape, p: &Tensor, image: &Tensor, binding: Binding) -> Result<Tensor> {
        self.check(p, image)?;
        let b = p.shape()[0];
        let slope = self.spec.slope;
        let cond = self.condition(tape, image)?;
        let mut h = tape.concat(&[p, &cond], 1)?;
        let mut trace = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let lin = layer.linear.forward(tape, &h, binding)?;
            let mu = tape.mean(&lin, &[1], true)?;
            let centered = tape.sub_bcast(&lin, &mu)?;
            let sq = tape.square(&centered)?;
            let var = tape.mean(&sq, &[1], true)?;
            let var = tape.add_scalar(&var, layer.norm.eps)?;
            let sigma = tape.sqrt(&var)?;
            let xhat = tape.div_bcast(&centered, &sigma)?;
            let gamma = bind(tape, &layer.norm.gamma, binding);
            let beta = bind(tape, &layer.norm.beta, binding);
            let width = gamma.numel();
            let gamma_row = tape.reshape(&gamma, &[1, width])?;
            let beta_row = tape.reshape(&beta, &[1, width])?;
            let z = tape.mul_bcast(&xhat, &gamma_row)?;
            let z = tape.add_bcast(&z, &beta_row)?;
            let mask = Tensor::new(z.shape(), z.data().iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect());
            h = tape.leaky_relu(&z, slope)?;
            trace.push(LayerTrace { xhat, sigma, mask });
        }
        let w_out = bind(tape, &self.out.weight, binding);
        let width = w_out.numel();
        let w_row = tape.reshape(&w_out, &[1, width])?;
        let mut g = tape.expand(&w_row, &[b, width])?;
        for (layer, t) in self.hidden.iter().zip(trace).rev() {
            g = tape.mul(&g, &t.mask)?;
            let gamma = bind(tape, &layer.norm.gamma, binding);
            let gamma_row = tape.reshape(&gamma, &[1, gamma.numel()])?;
            let gh = tape.mul_bcast(&g, &gamma_row)?;
            let m1 = tape.mean(&gh, &[1], true)?;
            let gx = tape.mul(&gh, &t.xhat)?;
            let m2 = tape.mean(&gx, &[1], true)?;
            let c = tape.sub_bcast(&gh, &m1)?;
            let proj = tape.mul_bcast(&t.xhat, &m2)?;
            let c = tape.sub(&c, &proj)?;
            let dh = tape.div_bcast(&c, &t.sigma)?;
            let w = bind(tape, &layer.linear.weight, binding);
            let wt = tape.transpose(&w)?;
            g = tape.matmul(&dh, &wt)?;
        }
        tape.narrow(&g, 1, 0, self.spec.classes)
    }

    /// Sets every weight and bias to zero except the output bias, which
    /// becomes `c`: a constant critic.
    pub fn make_constant(&mut self, c: f64) {
        self.visit_params_mut(&mut |p| p.value_mut().iter_mut().for_each(|v| *v = 0.0));
        self.out.bias.value_mut()[0] = c;
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Hidden blocks in order, as (linear, layer norm) pairs.
    pub fn layers(&self) -> impl Iterator<Item = (&Linear, &LayerNorm)> {
        self.hidden.iter().map(|l| (&l.linear, &l.norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(hidden: Vec<usize>) -> Discriminator {
        let spec = DiscriminatorSpec { classes: 3, image_shape: [1, 2, 2], hidden, slope: 0.2, conditioning: Conditioning::Flatten };
        Discriminator::new(spec, 5).unwrap()
    }

    #[test]
    fn zero_output_layer_scores_zero() {
        let mut d = small(vec![6, 5]);
        d.out.weight.value_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let p = Tensor::new(&[2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        let img = Tensor::full(&[2, 1, 2, 2], 0.7);
        let s = d.forward(&mut tape, &p, &img, Binding::Trainable).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_only_gradient_is_weight_column() {
        let d = small(vec![]);
        let mut tape = Tape::new();
        let p = Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]);
        let img = Tensor::full(&[1, 1, 2, 2], 0.1);
        let g = d.input_grad(&mut tape, &p, &img, Binding::Frozen).unwrap();
        assert_eq!(g.data(), &d.out.weight.value()[..3]);
    }

    #[test]
    fn mismatched_condition_is_rejected() {
        let d = small(vec![4]);
        let mut tape = Tape::new();
        let p = Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]);
        let img = Tensor::full(&[1, 1, 3, 3], 0.1);
        assert!(d.forward(&mut tape, &p, &img, Binding::Frozen).is_err());
    }
}
