use std::sync::Arc;

use branch_distill::autodiff::{detach, BnMode, Tape, Tensor};
use branch_distill::oracle::{fd_grad, rel_err_norm, FiniteDiffSpec};
use branch_distill::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const TOL: f64 = 1e-6;

type Op = dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero by `gap`.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Distinct values spaced well apart, so pooling windows have no ties.
fn untied(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, idx.into_iter().map(|k| k as f64 * 0.01 - 0.3).collect())
}

/// Weighted sum of `f`'s output with fixed random weights.
fn scalarize(tape: &mut Tape, y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let p = tape.mul(y, w)?;
    tape.sum_all(&p)
}

fn check(name: &str, rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, f: &Op) {
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let y = f(&mut tape, &leaves).unwrap();
    let w = uniform(rng, y.shape(), -1.0, 1.0);
    let loss = scalarize(&mut tape, &y, &w).unwrap();
    let grads = tape.backward(&loss).unwrap();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = fd_grad(
            |x| {
                let mut t = Tape::new();
                let mut ins = inputs.clone();
                ins[i] = Tensor::new(inputs[i].shape(), x.to_vec());
                let y = f(&mut t, &ins).unwrap();
                scalarize(&mut t, &y, &w).unwrap().item()
            },
            inputs[i].data(),
            FiniteDiffSpec::default(),
        )
        .unwrap();
        let err = rel_err_norm(&analytic, &numeric);
        assert!(err <= TOL, "{name}: input {i} relative error {err:e}\n analytic {analytic:?}\n numeric {numeric:?}");
    }
}

fn small_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    let max = [4, 4, 5, 5];
    (0..rank).map(|a| rng.random_range(1..=max[a + 4 - rank])).collect()
}

fn trials(seed: u64, mut body: impl FnMut(&mut ChaCha8Rng)) {
    for t in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + t);
        body(&mut rng);
    }
}

#[test]
fn elementwise_binary() {
    trials(1, |rng| {
        let rank = rng.random_range(1..=4);
        let s = small_shape(rng, rank);
        let a = uniform(rng, &s, -2.0, 2.0);
        let b = uniform(rng, &s, -2.0, 2.0);
        check("add", rng, vec![a.clone(), b.clone()], &|t, x| t.add(&x[0], &x[1]));
        check("sub", rng, vec![a.clone(), b.clone()], &|t, x| t.sub(&x[0], &x[1]));
        check("mul", rng, vec![a.clone(), b.clone()], &|t, x| t.mul(&x[0], &x[1]));
        let d = off_kink(rng, &s, 0.5);
        check("div", rng, vec![a, d], &|t, x| t.div(&x[0], &x[1]));
    });
}

#[test]
fn elementwise_unary() {
    trials(2, |rng| {
        let rank = rng.random_range(1..=4);
        let s = small_shape(rng, rank);
        let a = uniform(rng, &s, -2.0, 2.0);
        let pos = uniform(rng, &s, 0.2, 3.0);
        let kinked = off_kink(rng, &s, 1e-4);
        check("add_scalar", rng, vec![a.clone()], &|t, x| t.add_scalar(&x[0], 1.7));
        check("mul_scalar", rng, vec![a.clone()], &|t, x| t.mul_scalar(&x[0], -0.3));
        check("exp", rng, vec![a.clone()], &|t, x| t.exp(&x[0]));
        check("square", rng, vec![a.clone()], &|t, x| t.square(&x[0]));
        check("log", rng, vec![pos.clone()], &|t, x| t.log(&x[0]));
        check("sqrt", rng, vec![pos], &|t, x| t.sqrt(&x[0]));
        check("relu", rng, vec![kinked.clone()], &|t, x| t.relu(&x[0]));
        check("leaky_relu", rng, vec![kinked.clone()], &|t, x| t.leaky_relu(&x[0], 0.2));
        check("clamp_min", rng, vec![kinked], &|t, x| t.clamp_min(&x[0], 0.0));
    });
}

#[test]
fn matrix_products() {
    trials(3, |rng| {
        let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
        let a = uniform(rng, &[m, k], -1.0, 1.0);
        let b = uniform(rng, &[k, n], -1.0, 1.0);
        check("matmul", rng, vec![a, b], &|t, x| t.matmul(&x[0], &x[1]));
        let batch = rng.random_range(1..=4);
        let a = uniform(rng, &[batch, m, k], -1.0, 1.0);
        let b = uniform(rng, &[batch, k, n], -1.0, 1.0);
        check("bmm", rng, vec![a, b], &|t, x| t.bmm(&x[0], &x[1]));
    });
}

#[test]
fn convolution() {
    trials(4, |rng| {
        let b = rng.random_range(1..=4);
        let c = rng.random_range(1..=4);
        let o = rng.random_range(1..=4);
        let h = rng.random_range(3..=5);
        let w = rng.random_range(3..=5);
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let x = uniform(rng, &[b, c, h, w], -1.0, 1.0);
        let wt = uniform(rng, &[o, c, k, k], -1.0, 1.0);
        check("conv2d", rng, vec![x, wt], &move |t, x| t.conv2d(&x[0], &x[1], stride, pad));
    });
}

#[test]
fn pooling() {
    trials(5, |rng| {
        let b = rng.random_range(1..=4);
        let c = rng.random_range(1..=4);
        let x = untied(rng, &[b, c, 4, 4]);
        check("max_pool2d", rng, vec![x.clone()], &|t, x| t.max_pool2d(&x[0], 2, 2));
        check("max_pool2d overlapping", rng, vec![x.clone()], &|t, x| t.max_pool2d(&x[0], 3, 1));
        let y = uniform(rng, &[b, c, 4, 5], -1.0, 1.0);
        check("avg_pool2d", rng, vec![y], &|t, x| t.avg_pool2d(&x[0], 2, 2));
    });
}

#[test]
fn reductions_and_layout() {
    trials(6, |rng| {
        let s = small_shape(rng, 4);
        let a = uniform(rng, &s, -1.0, 1.0);
        check("sum", rng, vec![a.clone()], &|t, x| t.sum(&x[0], &[1, 3], false));
        check("sum keepdim", rng, vec![a.clone()], &|t, x| t.sum(&x[0], &[0, 2], true));
        check("mean", rng, vec![a.clone()], &|t, x| t.mean(&x[0], &[2], true));
        check("sum_all", rng, vec![a.clone()], &|t, x| t.sum_all(&x[0]));
        check("permute", rng, vec![a.clone()], &|t, x| t.permute(&x[0], &[2, 0, 3, 1]));
        let flat = [s.iter().product::<usize>()];
        check("reshape", rng, vec![a.clone()], &move |t, x| t.reshape(&x[0], &flat));
        let mut big = s.clone();
        big[1] = 3;
        let mut one = s.clone();
        one[1] = 1;
        let e = uniform(rng, &one, -1.0, 1.0);
        check("expand", rng, vec![e], &move |t, x| t.expand(&x[0], &big));
        let b = uniform(rng, &s, -1.0, 1.0);
        check("concat", rng, vec![a.clone(), b], &|t, x| t.concat(&[&x[0], &x[1]], 1));
        let len = s[3];
        check("narrow", rng, vec![a], &move |t, x| t.narrow(&x[0], 3, len / 2, len - len / 2));
    });
}

#[test]
fn normalizations() {
    trials(7, |rng| {
        let (b, c, h, w) = (rng.random_range(2..=4), rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
        let x = uniform(rng, &[b, c, h, w], -2.0, 2.0);
        let g = uniform(rng, &[c], 0.5, 1.5);
        let be = uniform(rng, &[c], -0.5, 0.5);
        check("batch_norm batch", rng, vec![x.clone(), g.clone(), be.clone()], &|t, x| {
            t.batch_norm(&x[0], &x[1], &x[2], 1e-5, BnMode::Batch).map(|r| r.0)
        });
        let mean = Arc::new((0..c).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let var = Arc::new((0..c).map(|i| 0.5 + i as f64 * 0.2).collect::<Vec<_>>());
        check("batch_norm fixed", rng, vec![x, g, be], &move |t, x| {
            let mode = BnMode::Fixed { mean: Arc::clone(&mean), var: Arc::clone(&var) };
            t.batch_norm(&x[0], &x[1], &x[2], 1e-5, mode).map(|r| r.0)
        });
        let d = rng.random_range(2..=5);
        let x = uniform(rng, &[b, d], -2.0, 2.0);
        let g = uniform(rng, &[d], 0.5, 1.5);
        let be = uniform(rng, &[d], -0.5, 0.5);
        check("layer_norm", rng, vec![x.clone(), g, be], &|t, x| t.layer_norm(&x[0], &x[1], &x[2], 1e-5));
        check("l2_norm", rng, vec![x.clone()], &|t, x| t.l2_norm(&x[0], 1));
        check("log_softmax", rng, vec![x.clone()], &|t, x| t.log_softmax(&x[0]));
        check("softmax", rng, vec![x], &|t, x| t.softmax(&x[0]));
    });
}

#[test]
fn add_example() {
    let mut t = Tape::new();
    let a = Tensor::new(&[2], vec![1.0, 2.0]);
    let b = Tensor::new(&[2], vec![3.0, 4.0]);
    assert_eq!(t.add(&a, &b).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn matmul_identity_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::new();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let x = uniform(&mut rng, &[3, 5], -3.0, 3.0);
    let y = t.matmul(&Tensor::new(&[3, 3], eye), &x).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_of_ones_is_nine() {
    let mut t = Tape::new();
    let y = t.conv2d(&Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::full(&[1, 1, 3, 3], 1.0), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn sum_and_square_examples() {
    let mut t = Tape::new();
    let x = t.leaf(&[2, 2], vec![0.5, -1.0, 2.0, 3.0]);
    let s = t.sum_all(&x).unwrap();
    assert_eq!(t.backward(&s).unwrap().get(&x).unwrap(), &[1.0; 4]);

    let mut t = Tape::new();
    let x = t.leaf(&[1], vec![3.0]);
    let sq = t.mul(&x, &x).unwrap();
    let s = t.sum_all(&sq).unwrap();
    assert_eq!(t.backward(&s).unwrap().get(&x).unwrap(), &[6.0]);
}

#[test]
fn softmax_onehot_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let a = uniform(&mut rng, &[4, 6], -3.0, 3.0);
        let mut onehot = vec![0.0; 24];
        for r in 0..4 {
            onehot[r * 6 + rng.random_range(0..6)] = 1.0;
        }
        let onehot = Tensor::new(&[4, 6], onehot);
        let f = |t: &mut Tape, a: &Tensor| -> Result<Tensor> {
            let p = t.softmax(a)?;
            let m = t.mul(&p, &onehot)?;
            t.mean_all(&m)
        };
        let mut t = Tape::new();
        let x = t.watch(&a);
        let loss = f(&mut t, &x).unwrap();
        let analytic = t.backward(&loss).unwrap().get(&x).unwrap().to_vec();
        let numeric = fd_grad(|v| f(&mut Tape::new(), &Tensor::new(&[4, 6], v.to_vec())).unwrap().item(), a.data(), FiniteDiffSpec::default()).unwrap();
        assert!(rel_err_norm(&analytic, &numeric) <= 1e-6);
    }
}

#[test]
fn detach_examples() {
    let mut t = Tape::new();
    let x = t.leaf(&[3], vec![1.0, 2.0, 3.0]);
    let w = t.leaf(&[3], vec![0.5, 0.5, 0.5]);
    let dx = detach(&x);
    assert_eq!(dx.data(), x.data());
    assert!(!dx.requires_grad());
    let p = t.mul(&dx, &w).unwrap();
    let s = t.sum_all(&p).unwrap();
    let g = t.backward(&s).unwrap();
    assert!(g.get(&x).is_none());
    assert_eq!(g.get(&w).unwrap(), x.data());
}

#[test]
fn constants_record_nothing() {
    let mut t = Tape::new();
    let a = Tensor::new(&[2], vec![1.0, 2.0]);
    let y = t.exp(&a).unwrap();
    assert!(!y.requires_grad());
    assert!(t.is_empty());
}

#[test]
fn cleared_tape_rejects_old_tensors() {
    let mut t = Tape::new();
    let x = t.leaf(&[1], vec![1.0]);
    t.clear();
    assert!(t.exp(&x).is_err());
}

#[test]
fn backward_needs_a_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(&[2], vec![1.0, 2.0]);
    let y = t.exp(&x).unwrap();
    assert!(t.backward(&y).is_err());
}

#[test]
fn max_pool_tie_goes_to_first_index() {
    let mut t = Tape::new();
    let x = t.leaf(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
    let y = t.max_pool2d(&x, 2, 2).unwrap();
    let s = t.sum_all(&y).unwrap();
    assert_eq!(t.backward(&s).unwrap().get(&x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn strict_mode_names_the_faulting_op() {
    let mut t = Tape::strict();
    let x = t.leaf(&[1], vec![-1.0]);
    match t.log(&x) {
        Err(branch_distill::Error::NumericFault { what }) => assert_eq!(what, "log"),
        other => panic!("unexpected {other:?}"),
    }
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn gradients_accumulate_over_branches(x in vec_strategy(6), w1 in vec_strategy(6), w2 in vec_strategy(6)) {
        let grad_of = |use_a: bool, use_b: bool| {
            let mut t = Tape::new();
            let xt = t.leaf(&[6], x.clone());
            let mut parts = Vec::new();
            if use_a {
                let p = t.mul(&xt, &Tensor::new(&[6], w1.clone())).unwrap();
                parts.push(t.sum_all(&p).unwrap());
            }
            if use_b {
                let sq = t.square(&xt).unwrap();
                let p = t.mul(&sq, &Tensor::new(&[6], w2.clone())).unwrap();
                parts.push(t.sum_all(&p).unwrap());
            }
            let loss = if parts.len() == 2 { t.add(&parts[0], &parts[1]).unwrap() } else { parts.pop().unwrap() };
            t.backward(&loss).unwrap().get(&xt).unwrap().to_vec()
        };
        let both = grad_of(true, true);
        let a = grad_of(true, false);
        let b = grad_of(false, true);
        for i in 0..6 {
            prop_assert_eq!(both[i], a[i] + b[i]);
        }
    }

    #[test]
    fn detach_equals_injected_constant(x in vec_strategy(4), w in vec_strategy(4)) {
        let run = |inject: bool| {
            let mut t = Tape::new();
            let xt = t.leaf(&[4], x.clone());
            let wt = t.leaf(&[4], w.clone());
            let e = t.exp(&xt).unwrap();
            let c = if inject { Tensor::new(&[4], e.to_vec()) } else { detach(&e) };
            let p = t.mul(&c, &wt).unwrap();
            let q = t.mul(&p, &xt).unwrap();
            let s = t.sum_all(&q).unwrap();
            let g = t.backward(&s).unwrap();
            (g.get(&xt).unwrap().to_vec(), g.get(&wt).unwrap().to_vec())
        };
        prop_assert_eq!(run(false), run(true));
    }

    #[test]
    fn ops_record_iff_an_input_requires_grad(x in vec_strategy(3), watch_a in any::<bool>(), watch_b in any::<bool>()) {
        let mut t = Tape::new();
        let a = if watch_a { t.leaf(&[3], x.clone()) } else { Tensor::new(&[3], x.clone()) };
        let b = if watch_b { t.leaf(&[3], x.clone()) } else { Tensor::new(&[3], x.clone()) };
        let before = t.len();
        let y = t.add(&a, &b).unwrap();
        prop_assert_eq!(y.requires_grad(), watch_a || watch_b);
        prop_assert_eq!(t.len() - before, usize::from(watch_a || watch_b));
    }
}

#[test]
fn convolution_matches_direct_loops() {
    trials(20, |rng| {
        let (b, c, o) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=2);
        if h + 2 * pad < k || w + 2 * pad < k {
            return;
        }
        let x = uniform(rng, &[b, c, h, w], -1.0, 1.0);
        let wt = uniform(rng, &[o, c, k, k], -1.0, 1.0);
        let y = Tape::new().conv2d(&x, &wt, stride, pad).unwrap();
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        assert_eq!(y.shape(), &[b, o, ho, wo]);
        let (xd, wd) = (x.data(), wt.data());
        for n in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += xd[((n * c + ic) * h + iy as usize) * w + ix as usize] * wd[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * o + oc) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() <= 1e-12 * (1.0 + acc.abs()), "{got} vs {acc}");
                    }
                }
            }
        }
    });
}
