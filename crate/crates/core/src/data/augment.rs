use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NormStats;

/// Which augmentations to apply, in the fixed order crop, flip, normalize.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Zero padding for the random crop; `None` disables cropping.
    pub crop_pad: Option<usize>,
    /// Mirror the width axis with probability one half.
    pub hflip: bool,
    pub normalize: Option<NormStats>,
}

impl AugmentPolicy {
    /// Pad-4 random crop, random flip, normalization.
    pub fn train(stats: NormStats) -> Self {
        AugmentPolicy { crop_pad: Some(4), hflip: true, normalize: Some(stats) }
    }

    /// Normalization only.
    pub fn eval(stats: NormStats) -> Self {
        AugmentPolicy { crop_pad: None, hflip: false, normalize: Some(stats) }
    }

    pub fn none() -> Self {
        AugmentPolicy { crop_pad: None, hflip: false, normalize: None }
    }

    pub fn is_random(&self) -> bool {
        self.crop_pad.is_some_and(|p| p > 0) || self.hflip
    }
}

/// The random stream for one sample in one epoch.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ index as u64);
    rng
}

/// Shifts the image as if zero-padded by `pad` and cropped at `(dy, dx)`
/// in the padded frame.
pub fn crop(img: &mut [f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize) {
    let [c, h, w] = shape;
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y + dy) as isize - pad as isize;
                let sx = (x + dx) as isize - pad as isize;
                img[ch * h * w + y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[ch * h * w + sy as usize * w + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

pub fn hflip(img: &mut [f64], shape: [usize; 3]) {
    let w = shape[2];
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

pub fn normalize(img: &mut [f64], shape: [usize; 3], stats: &NormStats) {
    let plane = shape[1] * shape[2];
    for (ch, chunk) in img.chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Applies the policy to one `(C, H, W)` image in place.
pub fn augment(img: &mut [f64], shape: [usize; 3], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) {
    if let Some(pad) = policy.crop_pad.filter(|&p| p > 0) {
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        crop(img, shape, pad, dy, dx);
    }
    if policy.hflip && rng.random_bool(0.5) {
        hflip(img, shape);
    }
    if let Some(stats) = &policy.normalize {
        normalize(img, shape, stats);
    }
}
