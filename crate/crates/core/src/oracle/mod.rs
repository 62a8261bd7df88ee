//! Reference implementations for testing.
//!
//! Everything here is written as plain loops over nested vectors and shares
//! no code with the tape or the loss module, so agreement between the two is
//! meaningful. Nothing here is fast.

pub mod suite;

use crate::error::{Error, Result};
use crate::losses::{KdPairing, LossWeights};
use crate::nn::{Conditioning, Discriminator};

/// Rows of a `(B, C)` matrix.
pub type Matrix = Vec<Vec<f64>>;

/// Per-sample feature maps of one classifier, each flattened as `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<Vec<f64>>,
}

impl FeatureBatch {
    /// Splits a flat `(B, C, H, W)` buffer.
    pub fn from_flat(shape: &[usize], data: &[f64]) -> Self {
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let samples = data.chunks(c * h * w).map(<[f64]>::to_vec).collect();
        FeatureBatch { c, h, w, samples }
    }
}

/// Splits a flat row-major `(B, C)` buffer.
pub fn rows(shape: &[usize], data: &[f64]) -> Matrix {
    data.chunks(shape[1]).map(<[f64]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDiffSpec {
    pub h: f64,
    /// Central differences when true, forward differences otherwise.
    pub central: bool,
    pub tolerance: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        FiniteDiffSpec { h: 1e-5, central: true, tolerance: 1e-6 }
    }
}

/// `|a - b| / max(1e-12, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-12f64.max(a.abs()).max(b.abs())
}

/// Largest element-wise [`rel_err`].
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Normwise relative error `max|a - b| / max(1e-12, max|a|, max|b|)`.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-12, f64::max);
    diff / scale
}

/// Numerical gradient of a scalar function.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], spec: FiniteDiffSpec) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let base = if spec.central { 0.0 } else { f(x) };
    if !base.is_finite() {
        return Err(Error::NumericFault { what: "finite difference at base point".into() });
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + spec.h;
        let up = f(&probe);
        let g = if spec.central {
            probe[i] = orig - spec.h;
            let down = f(&probe);
            (up - down) / (2.0 * spec.h)
        } else {
            (up - base) / spec.h
        };
        probe[i] = orig;
        if !g.is_finite() {
            return Err(Error::NumericFault { what: format!("finite difference at coordinate {i}") });
        }
        grad.push(g);
    }
    Ok(grad)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut e = vec![0.0; row.len()];
    let mut z = 0.0;
    for i in 0..row.len() {
        e[i] = (row[i] - m).exp();
        z += e[i];
    }
    for v in &mut e {
        *v /= z;
    }
    e
}

pub fn softened(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    softmax(&scaled)
}

fn log_softened(row: &[f64], temperature: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        m = m.max(v / temperature);
    }
    let mut z = 0.0;
    for &v in row {
        z += (v / temperature - m).exp();
    }
    let lz = m + z.ln();
    row.iter().map(|v| v / temperature - lz).collect()
}

/// Sum over classifiers of batch-mean cross-entropy.
pub fn cross_entropy(logits: &[Matrix], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for m in logits {
        let mut s = 0.0;
        for (row, &y) in m.iter().zip(labels) {
            s -= log_softened(row, 1.0)[y];
        }
        total += s / labels.len() as f64;
    }
    total
}

/// Batch-mean `KL(p || q)` for rows of logits at a temperature.
fn kl_rows(p_logits: &Matrix, q_logits: &Matrix, temperature: f64) -> f64 {
    let mut s = 0.0;
    for (a, b) in p_logits.iter().zip(q_logits) {
        let lp = log_softened(a, temperature);
        let lq = log_softened(b, temperature);
        for c in 0..a.len() {
            let p = lp[c].exp();
            if p > 0.0 {
                s += p * (lp[c] - lq[c]);
            }
        }
    }
    s / p_logits.len() as f64
}

/// `(1/K) sum_i sum_{j != i} KL(q_i || q_j)`.
pub fn kl_pairwise(logits: &[Matrix], temperature: f64) -> f64 {
    let n = logits.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += kl_rows(&logits[i], &logits[j], temperature);
            }
        }
    }
    total / (n - 1) as f64
}

/// `(N, N)` cosine similarities between the spatial positions of one sample.
pub fn similarity(sample: &[f64], c: usize, h: usize, w: usize) -> Matrix {
    let n = h * w;
    let mut norms = vec![0.0; n];
    for (a, norm) in norms.iter_mut().enumerate() {
        let mut s = 0.0;
        for ch in 0..c {
            s += sample[ch * n + a] * sample[ch * n + a];
        }
        *norm = s.sqrt().max(1e-12);
    }
    let mut out = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += sample[ch * n + a] * sample[ch * n + b];
            }
            out[a][b] = dot / (norms[a] * norms[b]);
        }
    }
    out
}

fn avg_pool(sample: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for di in 0..k {
                    for dj in 0..k {
                        s += sample[ch * h * w + (i * k + di) * w + j * k + dj];
                    }
                }
                out[ch * ho * wo + i * wo + j] = s / (k * k) as f64;
            }
        }
    }
    out
}

/// Similarity maps of every sample, pooled onto an `hmin x hmin` grid first.
fn maps_on_grid(f: &FeatureBatch, hmin: usize) -> Vec<Matrix> {
    let k = f.h / hmin;
    f.samples
        .iter()
        .map(|s| {
            if k == 1 {
                similarity(s, f.c, f.h, f.w)
            } else {
                similarity(&avg_pool(s, f.c, f.h, f.w, k), f.c, f.h / k, f.w / k)
            }
        })
        .collect()
}

fn sq_dist(a: &Matrix, b: &Matrix) -> f64 {
    let mut s = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            s += (x - y) * (x - y);
        }
    }
    s
}

/// `(1/N^2) sum_i 1/(n-i) sum_{j>i} mean_b ||S_i - S_j||^2`.
pub fn l2_simmaps(features: &[FeatureBatch]) -> f64 {
    let n = features.len();
    if n < 2 {
        return 0.0;
    }
    let hmin = features.iter().map(|f| f.h).min().unwrap();
    let maps: Vec<Vec<Matrix>> = features.iter().map(|f| maps_on_grid(f, hmin)).collect();
    let npos = maps[0][0].len() as f64;
    let batch = maps[0].len() as f64;
    let mut total = 0.0;
    for i in 0..n - 1 {
        let weight = 1.0 / (n - 1 - i) as f64;
        for j in i + 1..n {
            let mut s = 0.0;
            for b in 0..maps[i].len() {
                s += sq_dist(&maps[i][b], &maps[j][b]);
            }
            total += weight * s / batch;
        }
    }
    total / (npos * npos)
}

/// `mu_r * mean_i p_i + (1 - mu_r) * onehot(y)`.
pub fn real_mix(probs: &[Matrix], labels: &[usize], mu_r: f64) -> Matrix {
    let n = probs.len() as f64;
    let classes = probs[0][0].len();
    let mut out = vec![vec![0.0; classes]; labels.len()];
    for (b, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut ens = 0.0;
            for p in probs {
                ens += p[b][c];
            }
            let y = if labels[b] == c { 1.0 } else { 0.0 };
            *v = mu_r * ens / n + (1.0 - mu_r) * y;
        }
    }
    out
}

struct DenseLayer {
    w: Matrix,
    b: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
}

/// A copy of a critic's weights evaluated sample by sample.
pub struct NaiveCritic {
    layers: Vec<DenseLayer>,
    out_w: Vec<f64>,
    out_b: f64,
    slope: f64,
    image_shape: [usize; 3],
    conditioning: Conditioning,
}

fn weight_matrix(shape: &[usize], data: &[f64]) -> Matrix {
    data.chunks(shape[1]).map(<[f64]>::to_vec).collect()
}

impl NaiveCritic {
    pub fn from(d: &Discriminator) -> Self {
        let layers = d
            .layers()
            .map(|(lin, ln)| DenseLayer {
                w: weight_matrix(lin.weight.shape(), lin.weight.value()),
                b: lin.bias.value().to_vec(),
                gamma: ln.gamma.value().to_vec(),
                beta: ln.beta.value().to_vec(),
                eps: ln.eps,
            })
            .collect();
        NaiveCritic {
            layers,
            out_w: d.out.weight.value().to_vec(),
            out_b: d.out.bias.value()[0],
            slope: d.spec.slope,
            image_shape: d.spec.image_shape,
            conditioning: d.spec.conditioning,
        }
    }

    fn input(&self, p: &[f64], image: &[f64]) -> Vec<f64> {
        let [c, h, w] = self.image_shape;
        let mut x = p.to_vec();
        match self.conditioning {
            Conditioning::Flatten => x.extend_from_slice(image),
            Conditioning::AvgPool(k) => x.extend(avg_pool(image, c, h, w, k)),
        }
        x
    }

    /// Score of one sample.
    pub fn score(&self, p: &[f64], image: &[f64]) -> f64 {
        let mut x = self.input(p, image);
        for l in &self.layers {
            x = self.dense_forward(l, &x).z.iter().map(|&z| if z > 0.0 { z } else { self.slope * z }).collect();
        }
        let mut s = self.out_b;
        for (a, b) in x.iter().zip(&self.out_w) {
            s += a * b;
        }
        s
    }

    fn dense_forward(&self, l: &DenseLayer, x: &[f64]) -> DenseTrace {
        let width = l.b.len();
        let mut y = l.b.clone();
        for (i, xi) in x.iter().enumerate() {
            for o in 0..width {
                y[o] += xi * l.w[i][o];
            }
        }
        let mean = y.iter().sum::<f64>() / width as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let sigma = (var + l.eps).sqrt();
        let xhat: Vec<f64> = y.iter().map(|v| (v - mean) / sigma).collect();
        let z = xhat.iter().enumerate().map(|(o, v)| v * l.gamma[o] + l.beta[o]).collect();
        DenseTrace { xhat, sigma, z }
    }

    /// `dD(p|I)/dp` of one sample, by hand-written back-propagation.
    pub fn input_grad(&self, p: &[f64], image: &[f64]) -> Vec<f64> {
        let mut x = self.input(p, image);
        let mut traces = Vec::new();
        for l in &self.layers {
            let t = self.dense_forward(l, &x);
            x = t.z.iter().map(|&z| if z > 0.0 { z } else { self.slope * z }).collect();
            traces.push(t);
        }
        let mut g = self.out_w.clone();
        for (l, t) in self.layers.iter().zip(&traces).rev() {
            let width = g.len();
            let gh: Vec<f64> = (0..width)
                .map(|o| g[o] * if t.z[o] > 0.0 { 1.0 } else { self.slope } * l.gamma[o])
                .collect();
            let m1 = gh.iter().sum::<f64>() / width as f64;
            let m2 = gh.iter().zip(&t.xhat).map(|(a, b)| a * b).sum::<f64>() / width as f64;
            let dy: Vec<f64> = (0..width).map(|o| (gh[o] - m1 - t.xhat[o] * m2) / t.sigma).collect();
            let mut dx = vec![0.0; l.w.len()];
            for (i, row) in l.w.iter().enumerate() {
                for o in 0..width {
                    dx[i] += row[o] * dy[o];
                }
            }
            g = dx;
        }
        g.truncate(p.len());
        g
    }
}

struct DenseTrace {
    xhat: Vec<f64>,
    sigma: f64,
    z: Vec<f64>,
}

fn mean_score(d: &NaiveCritic, p: &Matrix, images: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (row, img) in p.iter().zip(images) {
        s += d.score(row, img);
    }
    s / p.len() as f64
}

/// Critic loss with gradient penalty; `eps` holds one interpolation weight
/// per sample, shared by all generators.
pub fn wgan_gp(d: &NaiveCritic, probs: &[Matrix], r: &Matrix, images: &[Vec<f64>], lambda_gp: f64, eps: &[f64]) -> f64 {
    let n = probs.len() as f64;
    let real = mean_score(d, r, images);
    let mut adv = 0.0;
    let mut gp = 0.0;
    for p in probs {
        adv += mean_score(d, p, images) - real;
        let mut pen = 0.0;
        for b in 0..p.len() {
            let hat: Vec<f64> = (0..p[b].len()).map(|c| eps[b] * r[b][c] + (1.0 - eps[b]) * p[b][c]).collect();
            let g = d.input_grad(&hat, &images[b]);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            pen += (norm - 1.0) * (norm - 1.0);
        }
        gp += pen / p.len() as f64;
    }
    adv / n + lambda_gp * gp / n
}

/// `-(1/n) sum_i mean D(p_i|I)`.
pub fn generator_w(d: &NaiveCritic, probs: &[Matrix], images: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for p in probs {
        s += mean_score(d, p, images);
    }
    -s / probs.len() as f64
}

pub fn sd_total(ce: f64, kl: f64, l2: f64, w: f64, weights: &LossWeights) -> f64 {
    (1.0 - weights.alpha) * ce + weights.alpha * kl + weights.beta * l2 + weights.gamma * w
}

/// Mean of `KL(q^t_j || q^s_i)` over the compared pairs.
pub fn kd_kl(teacher: &[Matrix], student: &[Matrix], temperature: f64, pairing: KdPairing) -> f64 {
    let n = student.len();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            if pairing == KdPairing::Matched && i != j {
                continue;
            }
            total += kl_rows(&teacher[j], &student[i], temperature);
            count += 1;
        }
    }
    total / count as f64
}

/// Student similarity map `i` against teacher maps `j >= i` (or `j == i`),
/// each group averaged, scaled by `1/N^2`.
pub fn kd_l2(teacher: &[FeatureBatch], student: &[FeatureBatch], pairing: KdPairing) -> f64 {
    let n = student.len();
    let hmin = teacher.iter().chain(student).map(|f| f.h).min().unwrap();
    let tm: Vec<Vec<Matrix>> = teacher.iter().map(|f| maps_on_grid(f, hmin)).collect();
    let sm: Vec<Vec<Matrix>> = student.iter().map(|f| maps_on_grid(f, hmin)).collect();
    let npos = sm[0][0].len() as f64;
    let batch = sm[0].len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let js: Vec<usize> = match pairing {
            KdPairing::All => (i..n).collect(),
            KdPairing::Matched => vec![i],
        };
        let weight = 1.0 / js.len() as f64;
        for j in js {
            let mut s = 0.0;
            for b in 0..sm[i].len() {
                s += sq_dist(&sm[i][b], &tm[j][b]);
            }
            total += weight * s / batch;
        }
    }
    total / (npos * npos)
}

pub fn kd_total(kl: f64, l2: f64, w: f64, weights: &LossWeights) -> f64 {
    weights.lambda1 * kl + weights.lambda2 * l2 + weights.lambda3 * w
}

/// Accuracy of the classifier that assigns each test point to the class
/// with the nearest training mean.
pub fn nearest_mean_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
) -> f64 {
    let dim = train_x[0].len();
    let mut means = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, &y) in train_x.iter().zip(train_y) {
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        if n > 0 {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut correct = 0;
    for (x, &y) in test_x.iter().zip(test_y) {
        let mut best = (f64::INFINITY, 0);
        for (c, m) in means.iter().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == y {
            correct += 1;
        }
    }
    correct as f64 / test_y.len() as f64
}
