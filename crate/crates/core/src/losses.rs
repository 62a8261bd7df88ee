//! Self-distillation objectives over the outputs of all classifiers.
//!
//! Every function takes the classifier outputs ordered shallow to deep, with
//! the primary stream last, and returns a single-element tensor recorded on
//! the given tape. Batch expectations are arithmetic means over the batch.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Binding, BranchOutputs, Discriminator};

/// Hyperparameters of the combined objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Balance between cross-entropy and KL distillation, in `[0, 1]`.
    pub alpha: f64,
    /// Similarity-map weight.
    pub beta: f64,
    /// Adversarial weight.
    pub gamma: f64,
    pub temperature: f64,
    /// Share of the ensemble in the critic's real sample, in `[0, 1]`.
    pub mu_r: f64,
    pub lambda_gp: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.3,
            beta: 0.03,
            gamma: 0.1,
            temperature: 3.0,
            mu_r: 0.5,
            lambda_gp: 10.0,
            lambda1: 0.3,
            lambda2: 0.03,
            lambda3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("temperature", self.temperature),
            ("mu_r", self.mu_r),
            ("lambda_gp", self.lambda_gp),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.mu_r > 1.0 {
            return Err(Error::Config(format!("mu_r must lie in [0, 1], got {}", self.mu_r)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn check_finite(what: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault { what: what.to_string() })
    }
}

/// Row-wise class probabilities.
pub fn softmax_probs(tape: &mut Tape, logits: &Tensor) -> Result<Tensor> {
    check_finite("logits", logits)?;
    tape.softmax(logits)
}

/// Probabilities of `logits / temperature`.
pub fn softened_probs(tape: &mut Tape, logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    if temperature == 1.0 {
        return softmax_probs(tape, logits);
    }
    check_finite("logits", logits)?;
    let scaled = tape.mul_scalar(logits, 1.0 / temperature)?;
    tape.softmax(&scaled)
}

fn log_softened(tape: &mut Tape, logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature == 1.0 {
        tape.log_softmax(logits)
    } else {
        let scaled = tape.mul_scalar(logits, 1.0 / temperature)?;
        tape.log_softmax(&scaled)
    }
}

/// One-hot `(B, classes)` matrix; rejects labels outside `[0, classes)`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!("label {y} outside [0, {classes})")));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::new(&[labels.len(), classes], data))
}

/// Batch-mean cross-entropy of one classifier, in log-sum-exp form.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &[logits.shape(), &[labels.len()]]));
    }
    check_finite("logits", logits)?;
    let y = one_hot(labels, logits.shape()[1])?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(&logp, &y)?;
    let s = tape.sum_all(&picked)?;
    tape.mul_scalar(&s, -1.0 / labels.len() as f64)
}

/// Sum over classifiers of their batch-mean cross-entropy.
pub fn loss_ce(tape: &mut Tape, logits: &[Tensor], labels: &[usize]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for l in logits {
        let ce = cross_entropy(tape, l, labels)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::Contract("loss_ce needs at least one classifier".into()))
}

/// Batch-mean `KL(p || q)` where `p` and `q` are given as log-probabilities
/// and `p` as probabilities. Zero-probability entries contribute zero.
fn kl_from_logs(tape: &mut Tape, p: &Tensor, logp: &Tensor, logq: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(logp, logq)?;
    let terms = tape.mul(p, &diff)?;
    let s = tape.sum_all(&terms)?;
    tape.mul_scalar(&s, 1.0 / p.shape()[0] as f64)
}

/// `(1/K) sum_i sum_{j != i} KL(q_i || q_j)` over softened outputs.
///
/// With `detach_target` the second argument of each pair is a constant, so
/// each ordered pair only moves its first classifier.
pub fn loss_kl_pairwise(tape: &mut Tape, logits: &[Tensor], temperature: f64, detach_target: bool) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let n = logits.len();
    if n < 2 {
        log::warn!("pairwise KL with {n} classifier(s) has no pairs; returning 0");
        return Ok(Tensor::scalar(0.0));
    }
    let mut logq = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for l in logits {
        check_finite("logits", l)?;
        let lq = log_softened(tape, l, temperature)?;
        q.push(tape.exp(&lq)?);
        logq.push(lq);
    }
    let mut total: Option<Tensor> = None;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let target = if detach_target { logq[j].detach() } else { logq[j].clone() };
            let kl = kl_from_logs(tape, &q[i], &logq[i], &target)?;
            total = Some(match total {
                Some(t) => tape.add(&t, &kl)?,
                None => kl,
            });
        }
    }
    let total = total.expect("at least one pair");
    tape.mul_scalar(&total, 1.0 / (n - 1) as f64)
}

/// Per-sample cosine similarity between all spatial feature vectors:
/// `(B, C, H, W) -> (B, N, N)` with `N = H * W`. Vector norms are clamped
/// below at `1e-12`.
pub fn similarity_map(tape: &mut Tape, features: &Tensor) -> Result<Tensor> {
    if features.rank() != 4 {
        return Err(Error::shape("similarity_map", &[features.shape()]));
    }
    let (b, c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2], features.shape()[3]);
    let n = h * w;
    let f = tape.reshape(features, &[b, c, n])?;
    let norms = tape.l2_norm(&f, 1)?;
    let norms = tape.clamp_min(&norms, 1e-12)?;
    let unit = tape.div_bcast(&f, &norms)?;
    let unit_t = tape.permute(&unit, &[0, 2, 1])?;
    tape.bmm(&unit_t, &unit)
}

/// Average-pools every feature map down to the smallest spatial grid.
pub fn align_features(tape: &mut Tape, features: &[Tensor]) -> Result<Vec<Tensor>> {
    let Some(hmin) = features.iter().map(|f| f.shape().get(2).copied().unwrap_or(0)).min() else {
        return Ok(Vec::new());
    };
    let wmin = features.iter().map(|f| f.shape().get(3).copied().unwrap_or(0)).min().unwrap_or(0);
    features
        .iter()
        .map(|f| {
            if f.rank() != 4 {
                return Err(Error::shape("align_features", &[f.shape()]));
            }
            let (h, w) = (f.shape()[2], f.shape()[3]);
            if (h, w) == (hmin, wmin) {
                return Ok(f.clone());
            }
            if hmin == 0 || h % hmin != 0 || w % wmin != 0 || h / hmin != w / wmin {
                return Err(Error::Config(format!("cannot pool a {h}x{w} feature map onto {hmin}x{wmin}")));
            }
            tape.avg_pool2d(f, h / hmin, h / hmin)
        })
        .collect()
}

/// Similarity-map distillation from deeper to shallower classifiers:
///
/// `(1/N^2) sum_i 1/(n-i) sum_{j>i} mean_b ||S_i - S_j||^2` (1-based `i`,
/// `n` classifiers). The deeper map of every pair is detached, so gradients
/// only reach the shallower classifier's path; the deepest classifier
/// receives none.
pub fn loss_l2_simmaps(tape: &mut Tape, features: &[Tensor]) -> Result<Tensor> {
    let n = features.len();
    if n < 2 {
        return Ok(Tensor::scalar(0.0));
    }
    let aligned = align_features(tape, features)?;
    let maps = aligned.iter().map(|f| similarity_map(tape, f)).collect::<Result<Vec<_>>>()?;
    let (b, npos) = (maps[0].shape()[0], maps[0].shape()[1]);
    if maps.iter().any(|m| m.shape() != maps[0].shape()) {
        return Err(Error::Config("similarity maps disagree in size after alignment".into()));
    }
    let mut total: Option<Tensor> = None;
    for i in 0..n - 1 {
        let weight = 1.0 / (n - 1 - i) as f64;
        for map_j in &maps[i + 1..] {
            let d = tape.sub(&maps[i], &map_j.detach())?;
            let sq = tape.square(&d)?;
            let s = tape.sum_all(&sq)?;
            let term = tape.mul_scalar(&s, weight / b as f64)?;
            total = Some(match total {
                Some(t) => tape.add(&t, &term)?,
                None => term,
            });
        }
    }
    let total = total.expect("at least one pair");
    tape.mul_scalar(&total, 1.0 / (npos * npos) as f64)
}

/// The critic's real sample `mu_r * mean_i p_i + (1 - mu_r) * y`, detached.
pub fn real_mix(probs: &[Tensor], labels: &[usize], mu_r: f64) -> Result<Tensor> {
    let first = probs.first().ok_or_else(|| Error::Contract("real_mix needs at least one classifier".into()))?;
    if probs.iter().any(|p| p.shape() != first.shape()) || first.rank() != 2 || first.shape()[0] != labels.len() {
        let shapes: Vec<&[usize]> = probs.iter().map(|p| p.shape()).collect();
        return Err(Error::shape("real_mix", &shapes));
    }
    let y = one_hot(labels, first.shape()[1])?;
    let scale = mu_r / probs.len() as f64;
    let mut r: Vec<f64> = y.data().iter().map(|v| (1.0 - mu_r) * v).collect();
    let mut ens = vec![0.0; r.len()];
    for p in probs {
        ens.iter_mut().zip(p.data()).for_each(|(e, v)| *e += v);
    }
    r.iter_mut().zip(&ens).for_each(|(r, e)| *r += scale * e);
    Ok(Tensor::new(first.shape(), r))
}

/// Row-wise interpolation `eps_b * r + (1 - eps_b) * p`.
pub fn interpolate(r: &Tensor, p: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if r.shape() != p.shape() || r.rank() != 2 || eps.len() != r.shape()[0] {
        return Err(Error::shape("interpolate", &[r.shape(), p.shape(), &[eps.len()]]));
    }
    let c = r.shape()[1];
    let data = r
        .data()
        .iter()
        .zip(p.data())
        .enumerate()
        .map(|(i, (&rv, &pv))| {
            let e = eps[i / c];
            e * rv + (1.0 - e) * pv
        })
        .collect();
    Ok(Tensor::new(r.shape(), data))
}

/// Critic objective with gradient penalty:
///
/// `(1/n) sum_i [mean D(p_i|I) - mean D(r|I)]
///   + (lambda_gp/n) sum_i mean (||grad D(p_hat_i|I)||_2 - 1)^2`
///
/// where `p_hat_i = eps * r + (1 - eps) * p_i` per sample. Generator
/// outputs and `r` must be detached.
pub fn loss_discriminator_wgangp(
    tape: &mut Tape,
    d: &Discriminator,
    probs: &[Tensor],
    r: &Tensor,
    images: &Tensor,
    lambda_gp: f64,
    eps: &[f64],
) -> Result<Tensor> {
    if probs.is_empty() {
        return Err(Error::Contract("critic loss needs at least one generator".into()));
    }
    if probs.iter().any(Tensor::requires_grad) || r.requires_grad() {
        return Err(Error::Contract("critic loss requires detached generator outputs and real sample".into()));
    }
    let n = probs.len() as f64;
    let real_scores = d.forward(tape, r, images, Binding::Trainable)?;
    let real = tape.mean_all(&real_scores)?;
    let mut fake_sum: Option<Tensor> = None;
    let mut gp_sum: Option<Tensor> = None;
    for p in probs {
        let s = d.forward(tape, p, images, Binding::Trainable)?;
        let m = tape.mean_all(&s)?;
        fake_sum = Some(match fake_sum {
            Some(t) => tape.add(&t, &m)?,
            None => m,
        });
        if lambda_gp != 0.0 {
            let p_hat = interpolate(r, p, eps)?;
            let g = d.input_grad(tape, &p_hat, images, Binding::Trainable)?;
            let norm = tape.l2_norm(&g, 1)?;
            let dev = tape.add_scalar(&norm, -1.0)?;
            let sq = tape.square(&dev)?;
            let pen = tape.mean_all(&sq)?;
            gp_sum = Some(match gp_sum {
                Some(t) => tape.add(&t, &pen)?,
                None => pen,
            });
        }
    }
    let fake = tape.mul_scalar(&fake_sum.expect("non-empty"), 1.0 / n)?;
    let mut loss = tape.sub(&fake, &real)?;
    if let Some(gp) = gp_sum {
        let gp = tape.mul_scalar(&gp, lambda_gp / n)?;
        loss = tape.add(&loss, &gp)?;
    }
    check_finite("loss_d", &loss)?;
    Ok(loss)
}

/// Generator objective `-(1/n) sum_i mean D(p_i|I)` with the critic frozen.
pub fn loss_generator_w(tape: &mut Tape, d: &Discriminator, probs: &[Tensor], images: &Tensor) -> Result<Tensor> {
    if probs.is_empty() {
        return Err(Error::Contract("generator loss needs at least one generator".into()));
    }
    let mut total: Option<Tensor> = None;
    for p in probs {
        let s = d.forward(tape, p, images, Binding::Frozen)?;
        let m = tape.mean_all(&s)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &m)?,
            None => m,
        });
    }
    tape.mul_scalar(&total.expect("non-empty"), -1.0 / probs.len() as f64)
}

/// Component losses of the self-distillation objective.
#[derive(Clone, Debug)]
pub struct SdComponents {
    pub ce: Tensor,
    pub kl: Tensor,
    pub l2: Tensor,
    /// Absent when the adversarial term is switched off.
    pub w: Option<Tensor>,
}

/// `(1 - alpha) CE + alpha KL + beta L2 + gamma W`.
pub fn loss_sd_total(tape: &mut Tape, c: &SdComponents, weights: &LossWeights) -> Result<Tensor> {
    check_finite("loss_ce", &c.ce)?;
    check_finite("loss_kl", &c.kl)?;
    check_finite("loss_l2", &c.l2)?;
    if let Some(w) = &c.w {
        check_finite("loss_w", w)?;
    }
    let mut total = tape.mul_scalar(&c.ce, 1.0 - weights.alpha)?;
    for (t, k) in [(&c.kl, weights.alpha), (&c.l2, weights.beta)] {
        let s = tape.mul_scalar(t, k)?;
        total = tape.add(&total, &s)?;
    }
    if let Some(w) = &c.w {
        let s = tape.mul_scalar(w, weights.gamma)?;
        total = tape.add(&total, &s)?;
    }
    Ok(total)
}

/// Which student/teacher classifier pairs the distillation terms compare.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KdPairing {
    /// KL over every (student, teacher) pair; similarity maps of student
    /// classifier `i` against every teacher classifier `j >= i`.
    #[default]
    All,
    /// Only classifier `i` of the student against classifier `i` of the teacher.
    Matched,
}

/// Component losses of the teacher-student objective.
#[derive(Clone, Debug)]
pub struct KdComponents {
    pub kl: Tensor,
    pub l2: Tensor,
    pub w: Option<Tensor>,
    pub total: Tensor,
}

/// Teacher-student objective `lambda1 KL + lambda2 L2 + lambda3 W`.
///
/// * KL: `KL(q^t_j || q^s_i)` at the distillation temperature, averaged over
///   the compared pairs.
/// * L2: `(1/N^2) sum_i 1/|J_i| sum_{j in J_i} mean_b ||S^s_i - S^t_j||^2`,
///   where `J_i` is the set of teacher classifiers compared with student `i`.
/// * W: the generator loss against `d_kd`, a critic whose real sample is
///   built from the teacher ensemble. Skipped when `d_kd` is `None`.
///
/// Terms whose weight is zero are not built.
pub fn loss_kd_total(
    tape: &mut Tape,
    teacher: &BranchOutputs,
    student: &BranchOutputs,
    weights: &LossWeights,
    pairing: KdPairing,
    d_kd: Option<&Discriminator>,
    images: &Tensor,
) -> Result<KdComponents> {
    let n = student.len();
    if teacher.len() != n || n == 0 {
        return Err(Error::Config(format!("teacher has {} classifiers, student {n}", teacher.len())));
    }
    if teacher.logits.iter().chain(&teacher.features).any(Tensor::requires_grad) {
        return Err(Error::Contract("teacher outputs must be detached".into()));
    }
    let pairs = |i: usize| -> Vec<usize> {
        match pairing {
            KdPairing::All => (0..n).collect(),
            KdPairing::Matched => vec![i],
        }
    };
    let map_pairs = |i: usize| -> Vec<usize> {
        match pairing {
            KdPairing::All => (i..n).collect(),
            KdPairing::Matched => vec![i],
        }
    };
    let temperature = weights.temperature;

    let kl = if weights.lambda1 != 0.0 {
        let mut student_log = Vec::with_capacity(n);
        for l in &student.logits {
            check_finite("student logits", l)?;
            student_log.push(log_softened(tape, l, temperature)?);
        }
        let mut teacher_log = Vec::with_capacity(n);
        let mut teacher_p = Vec::with_capacity(n);
        for l in &teacher.logits {
            let lq = log_softened(tape, l, temperature)?;
            teacher_p.push(tape.exp(&lq)?);
            teacher_log.push(lq);
        }
        let mut total: Option<Tensor> = None;
        let mut count = 0usize;
        for (i, slog) in student_log.iter().enumerate() {
            for j in pairs(i) {
                let kl = kl_from_logs(tape, &teacher_p[j], &teacher_log[j], slog)?;
                count += 1;
                total = Some(match total {
                    Some(t) => tape.add(&t, &kl)?,
                    None => kl,
                });
            }
        }
        tape.mul_scalar(&total.expect("non-empty"), 1.0 / count as f64)?
    } else {
        Tensor::scalar(0.0)
    };

    let l2 = if weights.lambda2 != 0.0 {
        let mut all = student.features.clone();
        all.extend(teacher.features.iter().cloned());
        let aligned = align_features(tape, &all)?;
        let maps = aligned.iter().map(|f| similarity_map(tape, f)).collect::<Result<Vec<_>>>()?;
        let (b, npos) = (maps[0].shape()[0], maps[0].shape()[1]);
        let mut total: Option<Tensor> = None;
        for i in 0..n {
            let js = map_pairs(i);
            let weight = 1.0 / js.len() as f64;
            for j in js {
                let d = tape.sub(&maps[i], &maps[n + j])?;
                let sq = tape.square(&d)?;
                let s = tape.sum_all(&sq)?;
                let term = tape.mul_scalar(&s, weight / b as f64)?;
                total = Some(match total {
                    Some(t) => tape.add(&t, &term)?,
                    None => term,
                });
            }
        }
        tape.mul_scalar(&total.expect("non-empty"), 1.0 / (npos * npos) as f64)?
    } else {
        Tensor::scalar(0.0)
    };

    let w = match (d_kd, weights.lambda3 != 0.0) {
        (Some(d), true) => {
            let probs = student.logits.iter().map(|l| softmax_probs(tape, l)).collect::<Result<Vec<_>>>()?;
            Some(loss_generator_w(tape, d, &probs, images)?)
        }
        _ => None,
    };

    check_finite("loss_kd_kl", &kl)?;
    check_finite("loss_kd_l2", &l2)?;
    let a = tape.mul_scalar(&kl, weights.lambda1)?;
    let b = tape.mul_scalar(&l2, weights.lambda2)?;
    let mut total = tape.add(&a, &b)?;
    if let Some(w) = &w {
        check_finite("loss_kd_w", w)?;
        let c = tape.mul_scalar(w, weights.lambda3)?;
        total = tape.add(&total, &c)?;
    }
    Ok(KdComponents { kl, l2, w, total })
}
