use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Pixels};
use crate::error::{Error, Result};

/// Shape, size and noise of a synthetic blob dataset:
/// `CxHxW:per_class:sigma[:test_per_class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub shape: [usize; 3],
    pub per_class: usize,
    pub sigma: f64,
    pub test_per_class: usize,
}

impl std::str::FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("synthetic dataset must look like CxHxW:per_class:sigma[:test_per_class], got {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let dims = parts[0].split('x').map(|d| d.parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        let shape: [usize; 3] = dims.try_into().map_err(|_| bad())?;
        let per_class = parts[1].parse().map_err(|_| bad())?;
        let sigma: f64 = parts[2].parse().map_err(|_| bad())?;
        let test_per_class = match parts.get(3) {
            Some(t) => t.parse().map_err(|_| bad())?,
            None => per_class,
        };
        if shape.contains(&0) || per_class == 0 || !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(bad());
        }
        Ok(SynthSpec { shape, per_class, sigma, test_per_class })
    }
}

impl std::fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [c, h, w] = self.shape;
        write!(f, "{c}x{h}x{w}:{}:{}", self.per_class, self.sigma)?;
        if self.test_per_class != self.per_class {
            write!(f, ":{}", self.test_per_class)?;
        }
        Ok(())
    }
}

fn class_means(classes: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes).map(|_| (0..len).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
}

fn draw(means: &[Vec<f64>], per_class: usize, sigma: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let classes = means.len();
    let n = classes * per_class;
    let mut pixels = Vec::with_capacity(n * means[0].len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        labels.push(y);
        for &m in &means[y] {
            let z: f64 = rng.sample(StandardNormal);
            pixels.push(m + sigma * z);
        }
    }
    (pixels, labels)
}

/// Class-conditional Gaussian images: every class has a random mean image
/// with pixels uniform in `[0, 1]`, and samples add `N(0, sigma^2)` noise.
/// Labels cycle through the classes.
pub fn synth_blobs(classes: usize, per_class: usize, shape: [usize; 3], sigma: f64, seed: u64) -> Result<Dataset> {
    let spec = SynthSpec { shape, per_class, sigma, test_per_class: 0 };
    synth_blobs_split(classes, &spec, seed).map(|(train, _)| train)
}

/// Training and test splits drawn around the same class means.
pub fn synth_blobs_split(classes: usize, spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    let len = spec.shape.iter().product();
    let means = class_means(classes, len, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (px, y) = draw(&means, spec.per_class, spec.sigma, &mut rng);
    let train = Dataset::new(spec.shape, Pixels::Float(px), y, classes)?;
    rng.set_stream(2);
    rng.set_word_pos(0);
    let (px, y) = draw(&means, spec.test_per_class, spec.sigma, &mut rng);
    let test = Dataset::new(spec.shape, Pixels::Float(px), y, classes)?;
    Ok((train, test))
}
