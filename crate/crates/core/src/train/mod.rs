//! Optimization, the alternating adversarial training loop, evaluation,
//! checkpoints and teacher-student distillation.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Precision, Record, Values, MAGIC, VERSION};
pub use optim::{cosine_lr, OptimizerState};

use crate::autodiff::{OpKind, Tape, Tensor};
use crate::data::{AugmentPolicy, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::{self, KdComponents, KdPairing, LossWeights, SdComponents};
use crate::nn::{ArchSpec, Binding, BranchOutputs, BranchedModel, Conditioning, Discriminator, DiscriminatorSpec, Module};

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub dataset: DatasetSpec,
    pub data_root: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Critic learning rate as a multiple of the scheduled rate.
    pub critic_lr_scale: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub kl_detach_target: bool,
    pub precision: Precision,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Share of the training split held out for model selection.
    pub val_fraction: f64,
    pub kd_pairing: KdPairing,
    /// Fault on the first non-finite intermediate value.
    pub strict: bool,
}

impl TrainConfig {
    pub fn new(arch: ArchSpec, dataset: DatasetSpec, seed: u64) -> Self {
        TrainConfig {
            arch,
            dataset,
            data_root: PathBuf::from("data"),
            epochs: 200,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            critic_steps: 1,
            critic_lr_scale: 0.1,
            seed,
            eval_every: 1,
            checkpoint_dir: None,
            kl_detach_target: false,
            precision: Precision::F64,
            train_limit: None,
            test_limit: None,
            val_fraction: 0.0,
            kd_pairing: KdPairing::All,
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("critic_lr_scale", self.critic_lr_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

/// A 64-bit seed for a named sub-stream of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_DISC: u64 = 1;
const STREAM_EPS: u64 = 2;
const STREAM_KD_DISC: u64 = 3;
const STREAM_KD_EPS: u64 = 4;
const STREAM_SHUFFLE: u64 = 1 << 32;

/// The critic used for an input shape: 3 hidden layers of 256 units,
/// conditioned on the flattened image, average-pooled until it has at most
/// 1024 values.
pub fn critic_spec(arch: &ArchSpec) -> DiscriminatorSpec {
    let mut spec = DiscriminatorSpec::standard(arch.classes, arch.in_shape);
    let [c, h, w] = arch.in_shape;
    let mut k = 1;
    while c * (h / k) * (w / k) > 1024 && h / (2 * k) > 0 && w / (2 * k) > 0 {
        k *= 2;
    }
    if k > 1 {
        spec.conditioning = Conditioning::AvgPool(k);
    }
    spec
}

/// Per-epoch loss summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub mean: StepMetrics,
    /// Largest absolute value of each term over the epoch's steps.
    pub peak: StepMetrics,
    pub lr: f64,
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub ce: f64,
    pub kl: f64,
    pub l2: f64,
    pub w: f64,
    pub d: f64,
    pub kd_kl: f64,
    pub kd_l2: f64,
    pub kd_w: f64,
    pub kd_d: f64,
    pub total: f64,
    /// Layer-norm ops recorded while building the generator objective.
    pub generator_critic_ops: usize,
}

impl StepMetrics {
    fn add(&mut self, o: &StepMetrics) {
        self.ce += o.ce;
        self.kl += o.kl;
        self.l2 += o.l2;
        self.w += o.w;
        self.d += o.d;
        self.kd_kl += o.kd_kl;
        self.kd_l2 += o.kd_l2;
        self.kd_w += o.kd_w;
        self.kd_d += o.kd_d;
        self.total += o.total;
        self.generator_critic_ops += o.generator_critic_ops;
    }

    /// Element-wise maximum of absolute values; NaN propagates.
    fn peak(&mut self, o: &StepMetrics) {
        let max = |a: f64, b: f64| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b.abs()) };
        self.ce = max(self.ce, o.ce);
        self.kl = max(self.kl, o.kl);
        self.l2 = max(self.l2, o.l2);
        self.w = max(self.w, o.w);
        self.d = max(self.d, o.d);
        self.kd_kl = max(self.kd_kl, o.kd_kl);
        self.kd_l2 = max(self.kd_l2, o.kd_l2);
        self.kd_w = max(self.kd_w, o.kd_w);
        self.kd_d = max(self.kd_d, o.kd_d);
        self.total = max(self.total, o.total);
        self.generator_critic_ops = self.generator_critic_ops.max(o.generator_critic_ops);
    }

    fn scale(&mut self, k: f64) {
        for v in [
            &mut self.ce,
            &mut self.kl,
            &mut self.l2,
            &mut self.w,
            &mut self.d,
            &mut self.kd_kl,
            &mut self.kd_l2,
            &mut self.kd_w,
            &mut self.kd_d,
            &mut self.total,
        ] {
            *v *= k;
        }
    }
}

/// Top-1 accuracies as fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// One entry per classifier, shallow to deep.
    pub classifiers: Vec<f64>,
    /// Argmax of the mean softmax over all classifiers.
    pub ensemble: f64,
}

/// Accuracy of every classifier and of their ensemble on a split, after
/// normalization only.
pub fn evaluate(model: &BranchedModel, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty split".into()));
    }
    let n = model.classifiers();
    let policy = AugmentPolicy::eval(data.stats.clone());
    let mut correct = vec![0usize; n];
    let mut ens_correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk, &policy, 0, 0);
        let out = model.infer(&mut Tape::new(), &x)?;
        let classes = data.classes;
        let mut ens = vec![0.0; chunk.len() * classes];
        for (k, l) in out.logits.iter().enumerate() {
            let p = losses::softmax_probs(&mut Tape::new(), l)?;
            for (b, row) in p.data().chunks(classes).enumerate() {
                if argmax(row) == y[b] {
                    correct[k] += 1;
                }
                ens[b * classes..(b + 1) * classes].iter_mut().zip(row).for_each(|(e, v)| *e += v / n as f64);
            }
        }
        for (b, row) in ens.chunks(classes).enumerate() {
            if argmax(row) == y[b] {
                ens_correct += 1;
            }
        }
    }
    let total = data.len() as f64;
    Ok(EvalReport { classifiers: correct.iter().map(|&c| c as f64 / total).collect(), ensemble: ens_correct as f64 / total })
}

/// Index of the first maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The frozen teacher of a teacher-student run and its own critic.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub model: BranchedModel,
    /// Built only when the adversarial distillation term is active.
    pub disc: Option<Discriminator>,
    pub opt: Option<OptimizerState>,
    pub rng: ChaCha8Rng,
}

/// Model, critic, optimizers and random state of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: BranchedModel,
    pub disc: Discriminator,
    pub opt_model: OptimizerState,
    pub opt_disc: OptimizerState,
    /// Draws the gradient-penalty interpolation weights.
    pub rng: ChaCha8Rng,
    pub teacher: Option<TeacherState>,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = BranchedModel::new(&cfg.arch, cfg.seed)?;
        let disc = Discriminator::new(critic_spec(&cfg.arch), derive_seed(cfg.seed, STREAM_DISC))?;
        let mut opt_model = OptimizerState::new(&model, cfg.lr0, cfg.momentum, cfg.weight_decay);
        let mut opt_disc = OptimizerState::new(&disc, cfg.lr0 * cfg.critic_lr_scale, cfg.momentum, cfg.weight_decay);
        opt_model.strict = cfg.strict;
        opt_disc.strict = cfg.strict;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPS));
        Ok(Trainer { cfg, model, disc, opt_model, opt_disc, rng, teacher: None, epoch: 0 })
    }

    /// Attaches a frozen teacher with the student's classifier count.
    pub fn with_teacher(mut self, teacher: BranchedModel) -> Result<Self> {
        let (t, s) = (&teacher.arch, &self.cfg.arch);
        if t.branches != s.branches {
            return Err(Error::Config(format!("teacher has {} branches, student {}", t.branches, s.branches)));
        }
        if t.classes != s.classes || t.in_shape != s.in_shape {
            return Err(Error::Config("teacher and student disagree on classes or input shape".into()));
        }
        let (disc, opt) = if self.cfg.weights.lambda3 != 0.0 {
            let d = Discriminator::new(critic_spec(s), derive_seed(self.cfg.seed, STREAM_KD_DISC))?;
            let lr = self.cfg.lr0 * self.cfg.critic_lr_scale;
            let mut o = OptimizerState::new(&d, lr, self.cfg.momentum, self.cfg.weight_decay);
            o.strict = self.cfg.strict;
            (Some(d), Some(o))
        } else {
            (None, None)
        };
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_KD_EPS));
        self.teacher = Some(TeacherState { model: teacher, disc, opt, rng });
        Ok(self)
    }

    fn tape(&self) -> Tape {
        let mut t = Tape::new();
        t.set_strict(self.cfg.strict);
        t
    }

    fn set_lr(&mut self, lr: f64) {
        let critic_lr = lr * self.cfg.critic_lr_scale;
        self.opt_model.lr = lr;
        self.opt_disc.lr = critic_lr;
        if let Some(o) = self.teacher.as_mut().and_then(|t| t.opt.as_mut()) {
            o.lr = critic_lr;
        }
    }

    /// One critic update against detached generator outputs and a detached
    /// real sample; returns the critic loss.
    pub fn critic_update(&mut self, probs: &[Tensor], x: &Tensor, y: &[usize]) -> Result<f64> {
        let r = losses::real_mix(probs, y, self.cfg.weights.mu_r)?;
        let eps: Vec<f64> = (0..y.len()).map(|_| self.rng.random::<f64>()).collect();
        let mut tape = self.tape();
        let loss = losses::loss_discriminator_wgangp(&mut tape, &self.disc, probs, &r, x, self.cfg.weights.lambda_gp, &eps)?;
        let g = tape.backward(&loss)?;
        self.disc.accumulate_grads(&g);
        self.opt_disc.step(&mut self.disc)?;
        Ok(loss.item())
    }

    fn teacher_critic_update(&mut self, probs: &[Tensor], teacher_probs: &[Tensor], x: &Tensor, y: &[usize]) -> Result<f64> {
        let (mu_r, lambda_gp, strict) = (self.cfg.weights.mu_r, self.cfg.weights.lambda_gp, self.cfg.strict);
        let Some(TeacherState { disc: Some(d), opt: Some(opt), rng, .. }) = self.teacher.as_mut() else {
            return Ok(0.0);
        };
        let r = losses::real_mix(teacher_probs, y, mu_r)?;
        let eps: Vec<f64> = (0..y.len()).map(|_| rng.random::<f64>()).collect();
        let mut tape = Tape::new();
        tape.set_strict(strict);
        let loss = losses::loss_discriminator_wgangp(&mut tape, d, probs, &r, x, lambda_gp, &eps)?;
        let g = tape.backward(&loss)?;
        d.accumulate_grads(&g);
        opt.step(d)?;
        Ok(loss.item())
    }

    /// Builds the generator objective on `tape` (which already holds the
    /// train-mode forward pass `out`), back-propagates it and updates the
    /// model with the critic frozen.
    pub fn generator_update(&mut self, mut tape: Tape, out: &BranchOutputs, x: &Tensor, y: &[usize]) -> Result<StepMetrics> {
        let w = self.cfg.weights;
        let mut m = StepMetrics::default();
        let ce = losses::loss_ce(&mut tape, &out.logits, y)?;
        let detached = out.detach();
        let kl = if w.alpha != 0.0 {
            losses::loss_kl_pairwise(&mut tape, &out.logits, w.temperature, self.cfg.kl_detach_target)?
        } else {
            losses::loss_kl_pairwise(&mut Tape::new(), &detached.logits, w.temperature, false)?
        };
        let l2 = if w.beta != 0.0 {
            losses::loss_l2_simmaps(&mut tape, &out.features)?
        } else {
            losses::loss_l2_simmaps(&mut Tape::new(), &detached.features)?
        };
        let gen_w = if w.gamma != 0.0 {
            let probs = out.logits.iter().map(|l| losses::softmax_probs(&mut tape, l)).collect::<Result<Vec<_>>>()?;
            Some(losses::loss_generator_w(&mut tape, &self.disc, &probs, x)?)
        } else {
            None
        };
        m.generator_critic_ops = tape.op_count(OpKind::LayerNorm);
        m.w = match &gen_w {
            Some(t) => t.item(),
            None => {
                let mut side = Tape::new();
                let probs = detached.logits.iter().map(|l| losses::softmax_probs(&mut side, l)).collect::<Result<Vec<_>>>()?;
                losses::loss_generator_w(&mut side, &self.disc, &probs, x)?.item()
            }
        };
        m.ce = ce.item();
        m.kl = kl.item();
        m.l2 = l2.item();
        let comps = SdComponents { ce, kl, l2, w: gen_w };
        let mut total = losses::loss_sd_total(&mut tape, &comps, &w)?;
        if let Some(kd) = self.kd_terms(&mut tape, out, x)? {
            m.kd_kl = kd.kl.item();
            m.kd_l2 = kd.l2.item();
            m.kd_w = kd.w.as_ref().map_or(0.0, Tensor::item);
            total = tape.add(&total, &kd.total)?;
        }
        m.total = total.item();
        let grads = tape.backward(&total)?;
        self.model.accumulate_grads(&grads);
        self.opt_model.step(&mut self.model)?;
        Ok(m)
    }

    fn kd_active(&self) -> bool {
        let w = &self.cfg.weights;
        self.teacher.is_some() && (w.lambda1 != 0.0 || w.lambda2 != 0.0 || w.lambda3 != 0.0)
    }

    fn kd_terms(&self, tape: &mut Tape, out: &BranchOutputs, x: &Tensor) -> Result<Option<KdComponents>> {
        if !self.kd_active() {
            return Ok(None);
        }
        let t = self.teacher.as_ref().expect("kd_active checks the teacher");
        let teacher_out = t.model.infer(&mut Tape::new(), x)?.detach();
        losses::loss_kd_total(tape, &teacher_out, out, &self.cfg.weights, self.cfg.kd_pairing, t.disc.as_ref(), x).map(Some)
    }

    /// One training step: a train-mode forward pass, `critic_steps` critic
    /// updates on its detached outputs, then one generator update.
    pub fn train_step(&mut self, x: &Tensor, y: &[usize]) -> Result<StepMetrics> {
        let mut tape = self.tape();
        let out = self.model.forward_all(&mut tape, x, true, Binding::Trainable)?;
        let probs = out.logits.iter().map(|l| losses::softmax_probs(&mut Tape::new(), &l.detach())).collect::<Result<Vec<_>>>()?;
        let mut d = 0.0;
        for _ in 0..self.cfg.critic_steps {
            d = self.critic_update(&probs, x, y)?;
        }
        let mut kd_d = 0.0;
        if self.kd_active() && self.teacher.as_ref().is_some_and(|t| t.disc.is_some()) {
            let teacher = &self.teacher.as_ref().expect("checked").model;
            let tout = teacher.infer(&mut Tape::new(), x)?;
            let tprobs = tout.logits.iter().map(|l| losses::softmax_probs(&mut Tape::new(), l)).collect::<Result<Vec<_>>>()?;
            for _ in 0..self.cfg.critic_steps {
                kd_d = self.teacher_critic_update(&probs, &tprobs, x, y)?;
            }
        }
        let mut m = self.generator_update(tape, &out, x, y)?;
        m.d = d;
        m.kd_d = kd_d;
        Ok(m)
    }

    /// Sample order of an epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STREAM_SHUFFLE + epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Trains one epoch at the scheduled rate; returns mean step metrics and
    /// the rate used. A trailing single-sample batch is skipped because batch
    /// normalization needs two samples.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<EpochLosses> {
        let epoch = self.epoch;
        let lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.lr0)?;
        self.set_lr(lr);
        let policy = self.cfg.dataset.train_policy(&train.stats);
        let order = self.epoch_order(train.len(), epoch);
        let mut sum = StepMetrics::default();
        let mut peak = StepMetrics::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 && steps > 0 {
                continue;
            }
            let (x, y) = train.batch(chunk, &policy, self.cfg.seed, epoch);
            let m = self.train_step(&x, &y)?;
            sum.add(&m);
            peak.peak(&m);
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Contract("training split is empty".into()));
        }
        sum.scale(1.0 / steps as f64);
        self.epoch += 1;
        Ok(EpochLosses { mean: sum, peak, lr })
    }

    /// Full state: model, critic(s), optimizer velocities, epoch and
    /// random state.
    pub fn checkpoint(&self) -> Checkpoint {
        let p = self.cfg.precision;
        let mut c = Checkpoint::new(self.cfg.arch.to_string());
        c.push_module("model.", &self.model, p);
        c.push_module("disc.", &self.disc, p);
        c.push_velocity("opt.model.", &self.model, &self.opt_model.velocity, p);
        c.push_velocity("opt.disc.", &self.disc, &self.opt_disc.velocity, p);
        if let Some(TeacherState { disc: Some(d), opt: Some(o), rng, .. }) = &self.teacher {
            c.push_module("kd.disc.", d, p);
            c.push_velocity("opt.kd.disc.", d, &o.velocity, p);
            c.push("meta.kd_rng", &[56], Values::U8(rng_bytes(rng)));
        }
        c.push("meta.epoch", &[8], Values::U8((self.epoch as u64).to_le_bytes().to_vec()));
        c.push("meta.rng", &[56], Values::U8(rng_bytes(&self.rng)));
        c
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. The teacher, if
    /// any, must be attached before calling this.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        let arch: ArchSpec = c.arch.parse()?;
        if arch != self.cfg.arch {
            return Err(Error::Config(format!("checkpoint arch `{}` differs from configured `{}`", c.arch, self.cfg.arch)));
        }
        c.restore_module("model.", &mut self.model)?;
        c.restore_module("disc.", &mut self.disc)?;
        c.restore_velocity("opt.model.", &self.model, &mut self.opt_model.velocity)?;
        c.restore_velocity("opt.disc.", &self.disc, &mut self.opt_disc.velocity)?;
        if let Some(TeacherState { disc: Some(d), opt: Some(o), rng, .. }) = &mut self.teacher {
            c.restore_module("kd.disc.", d)?;
            c.restore_velocity("opt.kd.disc.", d, &mut o.velocity)?;
            *rng = rng_from(c, "meta.kd_rng")?;
        }
        self.rng = rng_from(c, "meta.rng")?;
        let e = bytes_of(c, "meta.epoch", 8)?;
        self.epoch = u64::from_le_bytes(e.try_into().expect("8 bytes")) as usize;
        Ok(())
    }
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn bytes_of(c: &Checkpoint, name: &str, len: usize) -> Result<Vec<u8>> {
    match c.get(name).map(|r| &r.values) {
        Some(Values::U8(b)) if b.len() == len => Ok(b.clone()),
        _ => Err(Error::Config(format!("checkpoint lacks a {len}-byte {name} record"))),
    }
}

fn rng_from(c: &Checkpoint, name: &str) -> Result<ChaCha8Rng> {
    let b = bytes_of(c, name, 56)?;
    let seed: [u8; 32] = b[..32].try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

/// Loads the branched model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<BranchedModel> {
    let c = Checkpoint::load(path)?;
    let arch: ArchSpec = c.arch.parse()?;
    let mut model = BranchedModel::new(&arch, 0)?;
    c.restore_module("model.", &mut model)?;
    Ok(model)
}

/// Loss means and (on evaluation epochs) accuracies of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepMetrics,
    pub peak: StepMetrics,
    pub eval: Option<EvalReport>,
}

/// CSV header for `classifiers` classifiers.
pub fn metrics_header(classifiers: usize) -> String {
    let mut h = String::from("epoch,lr,loss_ce,loss_kl,loss_l2,loss_w,loss_d");
    for k in 1..=classifiers {
        let _ = write!(h, ",acc_c{k}");
    }
    h.push_str(",acc_ensemble");
    h
}

impl EpochRow {
    /// Six fractional digits; accuracy cells stay empty on epochs without
    /// evaluation.
    pub fn csv(&self, classifiers: usize) -> String {
        let l = &self.losses;
        let mut s = format!("{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", self.epoch, self.lr, l.ce, l.kl, l.l2, l.w, l.d);
        match &self.eval {
            Some(e) => {
                for a in &e.classifiers {
                    let _ = write!(s, ",{a:.6}");
                }
                let _ = write!(s, ",{:.6}", e.ensemble);
            }
            None => s.push_str(&",".repeat(classifiers + 1)),
        }
        s
    }
}

/// Outcome of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Best accuracy of each classifier over evaluated epochs.
    pub best: Vec<f64>,
    /// 1-based epoch at which each best accuracy was first reached.
    pub best_epoch: Vec<usize>,
    pub best_ensemble: f64,
    pub last_eval: EvalReport,
    pub rows: Vec<EpochRow>,
}

/// Training and model-selection splits for a configuration, both normalized
/// with statistics of the training part. With a validation fraction the
/// held-out tail of the training split replaces the test split.
pub fn load_splits(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = cfg.dataset.load(&cfg.data_root, cfg.arch.classes, cfg.seed)?;
    let train = match cfg.train_limit {
        Some(n) => train.take(n),
        None => train,
    };
    let test = match cfg.test_limit {
        Some(n) => test.take(n),
        None => test,
    };
    if train.shape != cfg.arch.in_shape {
        return Err(Error::Config(format!("dataset images are {:?}, arch expects {:?}", train.shape, cfg.arch.in_shape)));
    }
    let (mut train, mut test) = if cfg.val_fraction > 0.0 { train.split_validation(cfg.val_fraction)? } else { (train, test) };
    let stats = train.compute_stats();
    train.stats = stats.clone();
    test.stats = stats;
    Ok((train, test))
}

/// Trains for `cfg.epochs` epochs, evaluating on `eval` and keeping the best
/// model of every classifier. Writes `metrics.csv`, `best_c{k}.ckpt` and
/// `final.ckpt` into the checkpoint directory when one is configured.
pub fn run_loop(trainer: &mut Trainer, train: &Dataset, eval: &Dataset) -> Result<RunReport> {
    let cfg = trainer.cfg.clone();
    let n = trainer.model.classifiers();
    let mut csv = match &cfg.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", metrics_header(n)).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut best_epoch = vec![0; n];
    let mut best_ensemble = f64::NEG_INFINITY;
    let mut last_eval = None;
    let mut rows = Vec::with_capacity(cfg.epochs);
    while trainer.epoch < cfg.epochs {
        let EpochLosses { mean: losses, peak, lr } = trainer.run_epoch(train)?;
        let epoch = trainer.epoch;
        let eval_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let report = if eval_now { Some(evaluate(&trainer.model, eval, cfg.batch_size)?) } else { None };
        if let Some(r) = &report {
            for k in 0..n {
                if r.classifiers[k] > best[k] {
                    best[k] = r.classifiers[k];
                    best_epoch[k] = epoch;
                    if let Some(dir) = &cfg.checkpoint_dir {
                        trainer.checkpoint().save(&dir.join(format!("best_c{}.ckpt", k + 1)))?;
                    }
                }
            }
            best_ensemble = best_ensemble.max(r.ensemble);
            last_eval = Some(r.clone());
        }
        let row = EpochRow { epoch, lr, losses, peak, eval: report };
        log::info!("{}", row.csv(n));
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", row.csv(n)).map_err(|e| Error::io(&*path, e))?;
        }
        rows.push(row);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        trainer.checkpoint().save(&dir.join("final.ckpt"))?;
    }
    let last_eval = match last_eval {
        Some(e) => e,
        None => evaluate(&trainer.model, eval, cfg.batch_size)?,
    };
    Ok(RunReport { best, best_epoch, best_ensemble, last_eval, rows })
}

/// Self-distillation training from scratch.
pub fn train_run(cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (train, eval) = load_splits(cfg)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    run_loop(&mut trainer, &train, &eval)
}

/// Trains a fresh student against the frozen teacher stored at
/// `teacher_ckpt`, minimizing the self-distillation objective plus the
/// teacher-student terms.
pub fn train_teacher_student(teacher_ckpt: &Path, cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    let teacher = load_model(teacher_ckpt)?;
    let (train, eval) = load_splits(cfg)?;
    let mut trainer = Trainer::new(cfg.clone())?.with_teacher(teacher)?;
    run_loop(&mut trainer, &train, &eval)
}
