//! Randomized comparison of every vectorized loss against its loop oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rel_err_norm, rows, FeatureBatch, NaiveCritic};
use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::losses::{self, KdPairing, LossWeights, SdComponents};
use crate::nn::{BranchOutputs, Conditioning, Discriminator, DiscriminatorSpec, Module};

/// Worst relative error seen for one quantity.
#[derive(Clone, Debug)]
pub struct Report {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// One random problem: logits, features, labels, images and a critic.
pub struct Instance {
    pub logits: Vec<Tensor>,
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub images: Tensor,
    pub critic: Discriminator,
    pub eps: Vec<f64>,
    pub weights: LossWeights,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

impl Instance {
    /// Between 2 and 4 classifiers, batch at most 8, at most 10 classes and
    /// at most 16 spatial positions; the shallowest feature map is sometimes
    /// twice as large so that pooling is exercised.
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = rng.random_range(2..=4);
        let b = rng.random_range(1..=8);
        let classes = rng.random_range(2..=10);
        let c = rng.random_range(1..=4);
        let (h, w) = [(1, 2), (2, 2), (2, 4), (4, 4), (3, 3)][rng.random_range(0..5)];
        let pooled = h == 2 && w == 2 && rng.random_bool(0.5);
        let logits = (0..n).map(|_| uniform(rng, &[b, classes], -4.0, 4.0)).collect();
        let features = (0..n)
            .map(|i| {
                let (fh, fw) = if pooled && i == 0 { (4, 4) } else { (h, w) };
                uniform(rng, &[b, c, fh, fw], -1.0, 1.0)
            })
            .collect();
        let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let image_shape = [1, 2, 2];
        let images = uniform(rng, &[b, 1, 2, 2], 0.0, 1.0);
        let spec = DiscriminatorSpec {
            classes,
            image_shape,
            hidden: vec![rng.random_range(2..=6), rng.random_range(2..=6)],
            slope: 0.2,
            conditioning: if rng.random_bool(0.5) { Conditioning::Flatten } else { Conditioning::AvgPool(2) },
        };
        let mut critic = Discriminator::new(spec, rng.random())?;
        critic.visit_params_mut(&mut |p| p.value_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3)));
        let eps = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        let weights = LossWeights {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            gamma: rng.random_range(0.0..1.0),
            temperature: rng.random_range(0.5..5.0),
            mu_r: rng.random_range(0.0..1.0),
            lambda_gp: rng.random_range(0.0..20.0),
            lambda1: rng.random_range(0.0..1.0),
            lambda2: rng.random_range(0.0..1.0),
            lambda3: rng.random_range(0.0..1.0),
        };
        Ok(Instance { logits, features, labels, images, critic, eps, weights })
    }

    fn logit_rows(&self) -> Vec<super::Matrix> {
        self.logits.iter().map(|l| rows(l.shape(), l.data())).collect()
    }

    fn feature_batches(&self) -> Vec<FeatureBatch> {
        self.features.iter().map(|f| FeatureBatch::from_flat(f.shape(), f.data())).collect()
    }

    fn image_rows(&self) -> Vec<Vec<f64>> {
        self.images.data().chunks(4).map(<[f64]>::to_vec).collect()
    }
}

struct Tracker(Vec<Report>);

impl Tracker {
    fn record(&mut self, name: &'static str, vectorized: &[f64], naive: &[f64]) {
        let e = rel_err_norm(vectorized, naive);
        match self.0.iter_mut().find(|r| r.name == name) {
            Some(r) => {
                r.instances += 1;
                r.max_rel_err = r.max_rel_err.max(e);
            }
            None => self.0.push(Report { name, instances: 1, max_rel_err: e }),
        }
    }
}

/// Evaluates `instances` random problems and reports the worst relative
/// error per quantity.
pub fn equivalence(seed: u64, instances: usize) -> Result<Vec<Report>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker(Vec::new());
    for _ in 0..instances {
        let inst = Instance::random(&mut rng)?;
        compare(&inst, &mut t)?;
    }
    Ok(t.0)
}

fn compare(inst: &Instance, t: &mut Tracker) -> Result<()> {
    let mut tape = Tape::new();
    let w = &inst.weights;
    let lr = inst.logit_rows();
    let fb = inst.feature_batches();
    let imgs = inst.image_rows();
    let critic = NaiveCritic::from(&inst.critic);

    let p = losses::softmax_probs(&mut tape, &inst.logits[0])?;
    let naive: Vec<f64> = lr[0].iter().flat_map(|r| super::softmax(r)).collect();
    t.record("softmax", p.data(), &naive);

    let q = losses::softened_probs(&mut tape, &inst.logits[0], w.temperature)?;
    let naive: Vec<f64> = lr[0].iter().flat_map(|r| super::softened(r, w.temperature)).collect();
    t.record("softened softmax", q.data(), &naive);

    let ce = losses::loss_ce(&mut tape, &inst.logits, &inst.labels)?;
    let ce_n = super::cross_entropy(&lr, &inst.labels);
    t.record("cross-entropy", &[ce.item()], &[ce_n]);

    let kl = losses::loss_kl_pairwise(&mut tape, &inst.logits, w.temperature, false)?;
    let kl_n = super::kl_pairwise(&lr, w.temperature);
    t.record("pairwise KL", &[kl.item()], &[kl_n]);

    let last = inst.features.last().expect("non-empty");
    let s = losses::similarity_map(&mut tape, last)?;
    let lf = fb.last().expect("non-empty");
    let naive: Vec<f64> = lf.samples.iter().flat_map(|x| super::similarity(x, lf.c, lf.h, lf.w).concat()).collect();
    t.record("similarity map", s.data(), &naive);

    let l2 = losses::loss_l2_simmaps(&mut tape, &inst.features)?;
    let l2_n = super::l2_simmaps(&fb);
    t.record("similarity-map L2", &[l2.item()], &[l2_n]);

    let probs = inst.logits.iter().map(|l| losses::softmax_probs(&mut tape, l)).collect::<Result<Vec<_>>>()?;
    let prob_rows: Vec<_> = probs.iter().map(|p| rows(p.shape(), p.data())).collect();
    let r = losses::real_mix(&probs, &inst.labels, w.mu_r)?;
    let r_n = super::real_mix(&prob_rows, &inst.labels, w.mu_r);
    t.record("real mixture", r.data(), &r_n.concat());

    let d = losses::loss_discriminator_wgangp(&mut tape, &inst.critic, &probs, &r, &inst.images, w.lambda_gp, &inst.eps)?;
    let d_n = super::wgan_gp(&critic, &prob_rows, &r_n, &imgs, w.lambda_gp, &inst.eps);
    t.record("critic loss", &[d.item()], &[d_n]);

    let g = losses::loss_generator_w(&mut tape, &inst.critic, &probs, &inst.images)?;
    let g_n = super::generator_w(&critic, &prob_rows, &imgs);
    t.record("generator loss", &[g.item()], &[g_n]);

    let comps = SdComponents { ce, kl, l2, w: Some(g) };
    let sd = losses::loss_sd_total(&mut tape, &comps, w)?;
    let sd_n = super::sd_total(ce_n, kl_n, l2_n, g_n, w);
    t.record("self-distillation total", &[sd.item()], &[sd_n]);

    // teacher: the same logits and features reversed, scaled
    let teacher = BranchOutputs {
        logits: inst.logits.iter().rev().map(|l| Tensor::new(l.shape(), l.data().iter().map(|v| 0.7 * v + 0.1).collect())).collect(),
        features: inst.features.iter().rev().map(|f| Tensor::new(f.shape(), f.data().iter().map(|v| v * v - 0.2).collect())).collect(),
    };
    let student = BranchOutputs { logits: inst.logits.clone(), features: inst.features.clone() };
    let tl: Vec<_> = teacher.logits.iter().map(|l| rows(l.shape(), l.data())).collect();
    let tf: Vec<_> = teacher.features.iter().map(|f| FeatureBatch::from_flat(f.shape(), f.data())).collect();
    for pairing in [KdPairing::All, KdPairing::Matched] {
        let kd = losses::loss_kd_total(&mut tape, &teacher, &student, w, pairing, Some(&inst.critic), &inst.images)?;
        let kl_n = super::kd_kl(&tl, &lr, w.temperature, pairing);
        let l2_n = super::kd_l2(&tf, &fb, pairing);
        let total_n = super::kd_total(kl_n, l2_n, g_n, w);
        t.record("teacher-student KL", &[kd.kl.item()], &[kl_n]);
        t.record("teacher-student L2", &[kd.l2.item()], &[l2_n]);
        t.record("teacher-student total", &[kd.total.item()], &[total_n]);
    }
    Ok(())
}
