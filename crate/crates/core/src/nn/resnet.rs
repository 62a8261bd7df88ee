use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Binding, Conv2d, Linear};
use super::delegate_module;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Residual classifier layout: a 3x3 stem followed by `G` groups of basic
/// blocks, plus the number of auxiliary branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_shape: [usize; 3],
    pub stem_width: usize,
    pub stem_stride: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
    pub classes: usize,
    pub branches: usize,
}

impl ArchSpec {
    /// Resolves a named family for a given input shape.
    ///
    /// * `tiny-resnet`: 3 groups, widths 8/16/32, blocks 1/2/2.
    /// * `resnet18`: CIFAR-style ResNet-18, 4 groups of 2 blocks, widths 64..512.
    /// * `resnet18-narrow`: the ResNet-18 layout at widths 4/8/16/32.
    pub fn preset(name: &str, in_shape: [usize; 3], classes: usize, branches: usize) -> Result<Self> {
        let (stem_width, widths, blocks, strides) = match name {
            "tiny-resnet" => (8, vec![8, 16, 32], vec![1, 2, 2], vec![1, 2, 2]),
            "resnet18" => (64, vec![64, 128, 256, 512], vec![2, 2, 2, 2], vec![1, 2, 2, 2]),
            "resnet18-narrow" => (4, vec![4, 8, 16, 32], vec![2, 2, 2, 2], vec![1, 2, 2, 2]),
            other => return Err(Error::Config(format!("unsupported arch `{other}`"))),
        };
        let spec = ArchSpec { in_shape, stem_width, stem_stride: 1, widths, blocks, strides, classes, branches };
        spec.validate()?;
        Ok(spec)
    }

    pub fn groups(&self) -> usize {
        self.widths.len()
    }

    /// Same layout without auxiliary branches.
    pub fn baseline(&self) -> ArchSpec {
        ArchSpec { branches: 0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups();
        if !(3..=4).contains(&g) || self.blocks.len() != g || self.strides.len() != g {
            return Err(Error::Config(format!("arch needs 3 or 4 groups with matching blocks/strides, got {g}")));
        }
        if self.branches >= g {
            return Err(Error::Config(format!("{} branches requested but at most {} fit {} groups", self.branches, g - 1, g)));
        }
        if self.classes < 2 || self.in_shape.contains(&0) || self.blocks.contains(&0) || self.stem_width == 0 {
            return Err(Error::Config("arch has an empty dimension".into()));
        }
        if self.strides.iter().chain([&self.stem_stride]).any(|&s| s == 0) {
            return Err(Error::Config("arch stride must be positive".into()));
        }
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "resnet in={}x{}x{} stem={}/{} widths={} blocks={} strides={} classes={} branches={}",
            self.in_shape[0],
            self.in_shape[1],
            self.in_shape[2],
            self.stem_width,
            self.stem_stride,
            join(&self.widths),
            join(&self.blocks),
            join(&self.strides),
            self.classes,
            self.branches
        )
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed arch descriptor `{s}`"));
        let list = |v: &str| -> Result<Vec<usize>> { v.split(|c| c == ',' || c == 'x' || c == '/').map(|x| x.parse().map_err(|_| bad())).collect() };
        let mut parts = s.split_whitespace();
        if parts.next() != Some("resnet") {
            return Err(bad());
        }
        let mut spec = ArchSpec {
            in_shape: [0; 3],
            stem_width: 0,
            stem_stride: 1,
            widths: vec![],
            blocks: vec![],
            strides: vec![],
            classes: 0,
            branches: 0,
        };
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k {
                "in" => spec.in_shape = list(v)?.try_into().map_err(|_| bad())?,
                "stem" => match list(v)?.as_slice() {
                    [w, s] => (spec.stem_width, spec.stem_stride) = (*w, *s),
                    _ => return Err(bad()),
                },
                "widths" => spec.widths = list(v)?,
                "blocks" => spec.blocks = list(v)?,
                "strides" => spec.strides = list(v)?,
                "classes" => spec.classes = v.parse().map_err(|_| bad())?,
                "branches" => spec.branches = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct Shortcut {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

delegate_module!(Shortcut => conv, bn);

/// Two 3x3 convolutions with a residual connection.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<Shortcut>,
}

delegate_module!(BasicBlock => conv1, bn1, conv2, bn2, shortcut);

impl BasicBlock {
    fn new(rng: &mut ChaCha8Rng, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || in_c != out_c).then(|| Shortcut {
            conv: Conv2d::new(rng, &format!("{name}.shortcut.conv"), in_c, out_c, 1, stride, 0, false),
            bn: BatchNorm2d::new(&format!("{name}.shortcut.bn"), out_c),
        });
        BasicBlock {
            conv1: Conv2d::new(rng, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1, false),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_c),
            conv2: Conv2d::new(rng, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, false),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_c),
            shortcut,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, train: bool, binding: Binding) -> Result<Tensor> {
        let h = self.conv1.forward(tape, x, binding)?;
        let h = self.bn1.forward(tape, &h, train, binding)?;
        let h = tape.relu(&h)?;
        let h = self.conv2.forward(tape, &h, binding)?;
        let h = self.bn2.forward(tape, &h, train, binding)?;
        let skip = match &self.shortcut {
            Some(s) => {
                let y = s.conv.forward(tape, x, binding)?;
                s.bn.forward(tape, &y, train, binding)?
            }
            None => x.clone(),
        };
        let y = tape.add(&h, &skip)?;
        tape.relu(&y)
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

delegate_module!(Stem => conv, bn);

impl Stem {
    fn forward(&self, tape: &mut Tape, x: &Tensor, train: bool, binding: Binding) -> Result<Tensor> {
        let h = self.conv.forward(tape, x, binding)?;
        let h = self.bn.forward(tape, &h, train, binding)?;
        tape.relu(&h)
    }
}

/// An auxiliary classifier: one block per remaining group, then pooling
/// and a linear layer.
#[derive(Clone, Debug)]
pub struct BranchHead {
    pub blocks: Vec<BasicBlock>,
    pub fc: Linear,
}

delegate_module!(BranchHead => blocks, fc);

/// Logits and final feature maps of every classifier, shallow to deep.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub logits: Vec<Tensor>,
    pub features: Vec<Tensor>,
}

impl BranchOutputs {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn detach(&self) -> BranchOutputs {
        BranchOutputs {
            logits: self.logits.iter().map(Tensor::detach).collect(),
            features: self.features.iter().map(Tensor::detach).collect(),
        }
    }
}

fn run_blocks(blocks: &[BasicBlock], tape: &mut Tape, x: &Tensor, train: bool, binding: Binding) -> Result<Tensor> {
    let mut h = x.clone();
    for b in blocks {
        h = b.forward(tape, &h, train, binding)?;
    }
    Ok(h)
}

fn classify(fc: &Linear, tape: &mut Tape, features: &Tensor, binding: Binding) -> Result<Tensor> {
    let pooled = tape.mean(features, &[2, 3], false)?;
    fc.forward(tape, &pooled, binding)
}

/// Primary residual stream with `K` auxiliary heads; `K + 1` classifiers.
#[derive(Clone, Debug)]
pub struct BranchedModel {
    pub arch: ArchSpec,
    pub stem: Stem,
    pub groups: Vec<Vec<BasicBlock>>,
    pub heads: Vec<BranchHead>,
    pub fc: Linear,
}

delegate_module!(BranchedModel => stem, groups, heads, fc);

impl BranchedModel {
    /// Builds the model with He-initialized weights drawn from `seed`.
    ///
    /// Branch `k` (1-based) attaches after group `k` and holds one basic
    /// block for every later group, so its depth is below the primary
    /// stream's whenever a later group has more than one block.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem {
            conv: Conv2d::new(&mut rng, "stem.conv", arch.in_shape[0], arch.stem_width, 3, arch.stem_stride, 1, false),
            bn: BatchNorm2d::new("stem.bn", arch.stem_width),
        };
        let mut groups = Vec::with_capacity(arch.groups());
        let mut in_c = arch.stem_width;
        for g in 0..arch.groups() {
            let blocks = (0..arch.blocks[g])
                .map(|b| {
                    let (cin, stride) = if b == 0 { (in_c, arch.strides[g]) } else { (arch.widths[g], 1) };
                    BasicBlock::new(&mut rng, &format!("groups.{g}.{b}"), cin, arch.widths[g], stride)
                })
                .collect();
            groups.push(blocks);
            in_c = arch.widths[g];
        }
        let fc = Linear::new(&mut rng, "fc", in_c, arch.classes);
        let heads = (0..arch.branches)
            .map(|k| {
                let mut cin = arch.widths[k];
                let blocks = (k + 1..arch.groups())
                    .map(|g| {
                        let b = BasicBlock::new(&mut rng, &format!("heads.{k}.{g}"), cin, arch.widths[g], arch.strides[g]);
                        cin = arch.widths[g];
                        b
                    })
                    .collect();
                BranchHead { blocks, fc: Linear::new(&mut rng, &format!("heads.{k}.fc"), cin, arch.classes) }
            })
            .collect();
        Ok(BranchedModel { arch: arch.clone(), stem, groups, heads, fc })
    }

    pub fn classifiers(&self) -> usize {
        self.heads.len() + 1
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.arch.in_shape;
        if x.rank() != 4 || x.shape()[1..] != s || x.shape()[0] == 0 {
            return Err(Error::shape("forward_all", &[x.shape(), &s]));
        }
        Ok(())
    }

    /// Runs every classifier on one batch, sharing the primary stream up to
    /// each branch point.
    pub fn forward_all(&self, tape: &mut Tape, x: &Tensor, train: bool, binding: Binding) -> Result<BranchOutputs> {
        self.check_input(x)?;
        let mut logits = Vec::with_capacity(self.classifiers());
        let mut features = Vec::with_capacity(self.classifiers());
        let mut h = self.stem.forward(tape, x, train, binding)?;
        for (g, blocks) in self.groups.iter().enumerate() {
            h = run_blocks(blocks, tape, &h, train, binding)?;
            if let Some(head) = self.heads.get(g) {
                let f = run_blocks(&head.blocks, tape, &h, train, binding)?;
                logits.push(classify(&head.fc, tape, &f, binding)?);
                features.push(f);
            }
        }
        logits.push(classify(&self.fc, tape, &h, binding)?);
        features.push(h);
        Ok(BranchOutputs { logits, features })
    }

    /// Eval-mode forward with every parameter frozen.
    pub fn infer(&self, tape: &mut Tape, x: &Tensor) -> Result<BranchOutputs> {
        self.forward_all(tape, x, false, Binding::Frozen)
    }

    /// Standalone copy of classifier `k` (1-based; `K + 1` is the primary
    /// stream). Parameter identities are preserved.
    pub fn extract_single(&self, k: usize) -> Result<SingleClassifier> {
        let n = self.classifiers();
        if k == 0 || k > n {
            return Err(Error::Contract(format!("classifier index {k} outside 1..={n}")));
        }
        let (groups, tail, fc) = if k == n {
            (self.groups.clone(), Vec::new(), self.fc.clone())
        } else {
            let head = &self.heads[k - 1];
            (self.groups[..k].to_vec(), head.blocks.clone(), head.fc.clone())
        };
        Ok(SingleClassifier { arch: self.arch.clone(), index: k, stem: self.stem.clone(), groups, tail, fc })
    }
}

/// One classifier extracted from a [`BranchedModel`].
#[derive(Clone, Debug)]
pub struct SingleClassifier {
    pub arch: ArchSpec,
    pub index: usize,
    pub stem: Stem,
    pub groups: Vec<Vec<BasicBlock>>,
    pub tail: Vec<BasicBlock>,
    pub fc: Linear,
}

delegate_module!(SingleClassifier => stem, groups, tail, fc);

impl SingleClassifier {
    /// Returns `(logits, final feature map)`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, train: bool, binding: Binding) -> Result<(Tensor, Tensor)> {
        let s = self.arch.in_shape;
        if x.rank() != 4 || x.shape()[1..] != s {
            return Err(Error::shape("single_classifier", &[x.shape(), &s]));
        }
        let mut h = self.stem.forward(tape, x, train, binding)?;
        for blocks in &self.groups {
            h = run_blocks(blocks, tape, &h, train, binding)?;
        }
        h = run_blocks(&self.tail, tape, &h, train, binding)?;
        let logits = classify(&self.fc, tape, &h, binding)?;
        Ok((logits, h))
    }
}
