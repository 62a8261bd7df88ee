//! Layers, the branched residual classifier and the Wasserstein critic.

mod complexity;
mod discriminator;
mod layers;
mod resnet;

pub use complexity::{count_params_flops, Complexity, Countable};
pub use discriminator::{Conditioning, Discriminator, DiscriminatorSpec};
pub use layers::{BatchNorm2d, Binding, Conv2d, LayerNorm, Linear};
pub use resnet::{ArchSpec, BasicBlock, BranchHead, BranchOutputs, BranchedModel, SingleClassifier};

use crate::autodiff::{Gradients, Param};

/// Anything that owns parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Non-trainable state that must survive a checkpoint.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &[f64])) {}

    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Vec<f64>)) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.visit_params_mut(&mut |p| {
            p.requires_grad = on;
            if !on {
                p.grad = None;
            }
        });
    }

    /// Adds the gradients recorded on one tape into the parameters.
    fn accumulate_grads(&mut self, grads: &Gradients) {
        self.visit_params_mut(&mut |p| grads.accumulate(p));
    }

    /// Copies of every parameter value, in visit order.
    fn snapshot(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value().to_vec()));
        out
    }
}

macro_rules! delegate_module {
    ($ty:ty => $($field:ident),+) => {
        impl $crate::nn::Module for $ty {
            fn visit_params(&self, f: &mut dyn FnMut(&$crate::autodiff::Param)) {
                $( $crate::nn::Module::visit_params(&self.$field, f); )+
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut $crate::autodiff::Param)) {
                $( $crate::nn::Module::visit_params_mut(&mut self.$field, f); )+
            }
            fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
                $( $crate::nn::Module::visit_buffers(&self.$field, f); )+
            }
            fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
                $( $crate::nn::Module::visit_buffers_mut(&mut self.$field, f); )+
            }
        }
    };
}
pub(crate) use delegate_module;

impl<M: Module> Module for Vec<M> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.iter().for_each(|m| m.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|m| m.visit_params_mut(f));
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.iter().for_each(|m| m.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.iter_mut().for_each(|m| m.visit_buffers_mut(f));
    }
}

impl<M: Module> Module for Option<M> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(m) = self {
            m.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(m) = self {
            m.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let Some(m) = self {
            m.visit_buffers_mut(f);
        }
    }
}
