//! Datasets, file formats and augmentation.

mod augment;
mod cifar;
mod idx;
mod synth;

use std::path::{Path, PathBuf};

pub use augment::{augment, crop, hflip, normalize, sample_rng, AugmentPolicy};
pub use cifar::{load_cifar_binary, write_cifar_binary, CifarVariant};
pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use synth::{synth_blobs, synth_blobs_split, SynthSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "BRANCH_DISTILL_DATA";

/// Pixel storage: bytes read from disk (scaled to `[0, 1]` on access) or
/// generated floats.
#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    Bytes(Vec<u8>),
    Float(Vec<f64>),
}

impl Pixels {
    fn len(&self) -> usize {
        match self {
            Pixels::Bytes(b) => b.len(),
            Pixels::Float(f) => f.len(),
        }
    }
}

/// Per-channel normalization constants.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

/// Labelled images of shape `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub pixels: Pixels,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Normalization constants, normally taken from the training split.
    pub stats: NormStats,
}

impl Dataset {
    pub fn new(shape: [usize; 3], pixels: Pixels, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if pixels.len() != per * labels.len() {
            return Err(Error::Contract(format!("{} pixels do not fit {} samples of shape {shape:?}", pixels.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
        }
        let stats = NormStats::identity(shape[0]);
        Ok(Dataset { shape, pixels, labels, classes, stats })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Writes sample `i` as floats in `[0, 1]` (or raw generated values).
    pub fn write_sample(&self, i: usize, out: &mut [f64]) {
        let n = self.sample_len();
        match &self.pixels {
            Pixels::Bytes(b) => {
                for (o, &v) in out.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                    *o = f64::from(v) / 255.0;
                }
            }
            Pixels::Float(f) => out.copy_from_slice(&f[i * n..(i + 1) * n]),
        }
    }

    pub fn sample(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.sample_len()];
        self.write_sample(i, &mut v);
        v
    }

    /// Per-channel mean and population standard deviation over all samples.
    pub fn compute_stats(&self) -> NormStats {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut buf = vec![0.0; self.sample_len()];
        for i in 0..self.len() {
            self.write_sample(i, &mut buf);
            for ch in 0..c {
                for v in &buf[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }

    /// Samples at the given indices, keeping classes and statistics.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.sample_len();
        let pixels = match &self.pixels {
            Pixels::Bytes(b) => Pixels::Bytes(indices.iter().flat_map(|&i| b[i * n..(i + 1) * n].iter().copied()).collect()),
            Pixels::Float(f) => Pixels::Float(indices.iter().flat_map(|&i| f[i * n..(i + 1) * n].iter().copied()).collect()),
        };
        Dataset {
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            stats: self.stats.clone(),
        }
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits off the last `fraction` of the samples.
    pub fn split_validation(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction must lie in [0, 1), got {fraction}")));
        }
        let keep = self.len() - (self.len() as f64 * fraction).round() as usize;
        let a: Vec<usize> = (0..keep).collect();
        let b: Vec<usize> = (keep..self.len()).collect();
        Ok((self.subset(&a), self.subset(&b)))
    }

    /// A `(B, C, H, W)` batch of the given samples after the policy.
    /// Random choices depend only on `(seed, epoch, sample index)`.
    pub fn batch(&self, indices: &[usize], policy: &AugmentPolicy, seed: u64, epoch: usize) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = vec![0.0; indices.len() * n];
        for (slot, &i) in indices.iter().enumerate() {
            let out = &mut data[slot * n..(slot + 1) * n];
            self.write_sample(i, out);
            let mut rng = sample_rng(seed, epoch, i);
            augment(out, self.shape, policy, &mut rng);
        }
        let [c, h, w] = self.shape;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&[indices.len(), c, h, w], data), labels)
    }

    /// Feeds the dataset's content to `f` in chunks, for checksums.
    pub fn hash_into(&self, f: &mut dyn FnMut(&[u8])) {
        for d in self.shape {
            f(&(d as u64).to_le_bytes());
        }
        match &self.pixels {
            Pixels::Bytes(b) => f(b),
            Pixels::Float(v) => v.iter().for_each(|x| f(&x.to_le_bytes())),
        }
        self.labels.iter().for_each(|&y| f(&(y as u32).to_le_bytes()));
    }
}

/// Named dataset families.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
    Synthetic(SynthSpec),
}

impl std::str::FromStr for DatasetSpec {
    type Err = Error;

    /// `mnist`, `fashion-mnist`, `cifar10`, `cifar100` or
    /// `synthetic:CxHxW:per_class:sigma`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetSpec::Mnist),
            "fashion-mnist" => Ok(DatasetSpec::FashionMnist),
            "cifar10" => Ok(DatasetSpec::Cifar10),
            "cifar100" => Ok(DatasetSpec::Cifar100),
            _ => s
                .strip_prefix("synthetic:")
                .ok_or_else(|| Error::Config(format!("unknown dataset {s:?}")))
                .and_then(|rest| rest.parse().map(DatasetSpec::Synthetic)),
        }
    }
}

impl std::fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSpec::Mnist => write!(f, "mnist"),
            DatasetSpec::FashionMnist => write!(f, "fashion-mnist"),
            DatasetSpec::Cifar10 => write!(f, "cifar10"),
            DatasetSpec::Cifar100 => write!(f, "cifar100"),
            DatasetSpec::Synthetic(s) => write!(f, "synthetic:{s}"),
        }
    }
}

impl DatasetSpec {
    /// Training-time augmentation: crop and flip for the colour datasets,
    /// normalization only otherwise.
    pub fn train_policy(&self, stats: &NormStats) -> AugmentPolicy {
        match self {
            DatasetSpec::Cifar10 | DatasetSpec::Cifar100 => AugmentPolicy::train(stats.clone()),
            _ => AugmentPolicy::eval(stats.clone()),
        }
    }

    /// Loads the training and test splits. The training split's
    /// normalization statistics are attached to both.
    pub fn load(&self, root: &Path, classes: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self {
            DatasetSpec::Mnist | DatasetSpec::FashionMnist => {
                let dir = root.join(if *self == DatasetSpec::Mnist { "mnist" } else { "fashion-mnist" });
                let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
                let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
                (train, test)
            }
            DatasetSpec::Cifar10 => {
                let dir = root.join("cifar-10-batches-bin");
                let files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                let train = load_cifar_binary(&files, CifarVariant::Ten)?;
                let test = load_cifar_binary(&[dir.join("test_batch.bin")], CifarVariant::Ten)?;
                (train, test)
            }
            DatasetSpec::Cifar100 => {
                let dir = root.join("cifar-100-binary");
                let train = load_cifar_binary(&[dir.join("train.bin")], CifarVariant::HundredFine)?;
                let test = load_cifar_binary(&[dir.join("test.bin")], CifarVariant::HundredFine)?;
                (train, test)
            }
            DatasetSpec::Synthetic(s) => synth_blobs_split(classes, s, seed)?,
        };
        if train.classes != classes {
            return Err(Error::Config(format!("dataset {self} has {} classes, config says {classes}", train.classes)));
        }
        let stats = train.compute_stats();
        train.stats = stats.clone();
        test.stats = stats;
        Ok((train, test))
    }
}

/// Dataset root: an explicit path, else `$BRANCH_DISTILL_DATA`, else `data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), offset, msg: msg.into() }
}
