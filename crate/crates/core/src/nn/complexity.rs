use super::layers::{Conv2d, Linear};
use super::resnet::{BasicBlock, BranchedModel, SingleClassifier};
use super::Module;

/// Parameter and FLOP counts for one input sample.
///
/// FLOPs count only convolutions and linear layers, at two FLOPs per
/// multiply-accumulate; normalization and activations are ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Complexity {
    pub params: usize,
    pub flops: usize,
}

pub fn count_params_flops<M: Countable + ?Sized>(m: &M) -> Complexity {
    m.complexity()
}

pub trait Countable {
    fn complexity(&self) -> Complexity;
}

fn conv_flops(conv: &Conv2d, hw: (usize, usize)) -> (usize, (usize, usize)) {
    let (ho, wo) = conv.out_hw(hw.0, hw.1);
    let k = conv.kernel();
    (2 * conv.out_channels() * conv.in_channels() * k * k * ho * wo, (ho, wo))
}

fn linear_flops(l: &Linear) -> usize {
    2 * l.input_dim() * l.output_dim()
}

fn blocks_flops(blocks: &[BasicBlock], mut hw: (usize, usize)) -> (usize, (usize, usize)) {
    let mut total = 0;
    for b in blocks {
        let (f1, out) = conv_flops(&b.conv1, hw);
        let (f2, _) = conv_flops(&b.conv2, out);
        let fs = b.shortcut.as_ref().map_or(0, |s| conv_flops(&s.conv, hw).0);
        total += f1 + f2 + fs;
        hw = out;
    }
    (total, hw)
}

impl Countable for Linear {
    fn complexity(&self) -> Complexity {
        Complexity { params: self.param_count(), flops: linear_flops(self) }
    }
}

impl Countable for Conv2d {
    /// FLOPs for a square input of the kernel's own size are meaningless, so
    /// a standalone convolution reports parameters only.
    fn complexity(&self) -> Complexity {
        Complexity { params: self.param_count(), flops: 0 }
    }
}

impl Countable for SingleClassifier {
    fn complexity(&self) -> Complexity {
        let [_, h, w] = self.arch.in_shape;
        let (mut flops, mut hw) = conv_flops(&self.stem.conv, (h, w));
        for blocks in self.groups.iter().chain(std::iter::once(&self.tail)) {
            let (f, out) = blocks_flops(blocks, hw);
            flops += f;
            hw = out;
        }
        flops += linear_flops(&self.fc);
        Complexity { params: self.param_count(), flops }
    }
}

impl Countable for BranchedModel {
    /// Training-time cost: the shared stream evaluated once plus every head.
    fn complexity(&self) -> Complexity {
        let [_, h, w] = self.arch.in_shape;
        let (mut flops, mut hw) = conv_flops(&self.stem.conv, (h, w));
        for (g, blocks) in self.groups.iter().enumerate() {
            let (f, out) = blocks_flops(blocks, hw);
            flops += f;
            hw = out;
            if let Some(head) = self.heads.get(g) {
                flops += blocks_flops(&head.blocks, hw).0 + linear_flops(&head.fc);
            }
        }
        flops += linear_flops(&self.fc);
        Complexity { params: self.param_count(), flops }
    }
}
