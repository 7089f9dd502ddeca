//! Central finite-difference oracle for every differentiable op.
//!
//! Each check contracts the op's output with a fixed random cotangent `r`, so
//! the scalar `L = <r, op(inputs)>` has gradient `backward(r)`. The numeric
//! side perturbs each input element by `+-h` and never calls a backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechfcn::nncore::ops::{self, Padding};
use speechfcn::nncore::{Tape, Tensor};

pub const STEP: f64 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn numeric_grad(x: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - STEP;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * STEP);
    }
    g
}

pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// `(op name, worst relative error over all inputs and seeds)`.
pub type CheckResult = (String, f64);

fn worst(results: &mut Vec<CheckResult>, name: &str, err: f64) {
    match results.iter_mut().find(|(n, _)| n == name) {
        Some((_, e)) => *e = e.max(err),
        None => results.push((name.to_string(), err)),
    }
}

/// Pushes values that sit within `margin` of a ReLU6 kink away from it.
fn avoid_kinks(t: &mut Tensor, margin: f64) {
    for v in t.data_mut() {
        for kink in [0.0, 6.0] {
            if (*v - kink).abs() < margin {
                *v = kink + margin * if *v >= kink { 2.0 } else { -2.0 };
            }
        }
    }
}

pub fn run_gradient_suite(seeds: &[u64]) -> Vec<CheckResult> {
    let mut results = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // conv2d, both inputs, strided and same/valid.
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let x = random(&[2, 2, 4, 5], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let y = ops::conv2d(&x, &k, stride, padding).unwrap();
            let r = random(y.shape(), &mut rng);
            let (dx, dk) = ops::conv2d_backward(&x, &k, stride, padding, &r, true).unwrap();
            let nx = numeric_grad(&x, |xp| dot(&r, &ops::conv2d(xp, &k, stride, padding).unwrap()));
            let nk = numeric_grad(&k, |kp| dot(&r, &ops::conv2d(&x, kp, stride, padding).unwrap()));
            worst(&mut results, "conv2d", max_rel_err(&dx.unwrap(), &nx));
            worst(&mut results, "conv2d", max_rel_err(&dk, &nk));
        }

        // pointwise fast path
        {
            let x = random(&[2, 3, 3, 4], &mut rng);
            let k = random(&[2, 3, 1, 1], &mut rng);
            let y = ops::conv2d(&x, &k, 1, Padding::Same).unwrap();
            let r = random(y.shape(), &mut rng);
            let (dx, dk) = ops::conv2d_backward(&x, &k, 1, Padding::Same, &r, true).unwrap();
            let nx = numeric_grad(&x, |xp| dot(&r, &ops::conv2d(xp, &k, 1, Padding::Same).unwrap()));
            let nk = numeric_grad(&k, |kp| dot(&r, &ops::conv2d(&x, kp, 1, Padding::Same).unwrap()));
            worst(&mut results, "conv2d_pointwise", max_rel_err(&dx.unwrap(), &nx));
            worst(&mut results, "conv2d_pointwise", max_rel_err(&dk, &nk));
        }

        for stride in [1, 2] {
            let x = random(&[2, 3, 5, 6], &mut rng);
            let k = random(&[3, 3, 3], &mut rng);
            let y = ops::depthwise_conv2d(&x, &k, stride, Padding::Same).unwrap();
            let r = random(y.shape(), &mut rng);
            let (dx, dk) =
                ops::depthwise_conv2d_backward(&x, &k, stride, Padding::Same, &r, true).unwrap();
            let f = |xp: &Tensor, kp: &Tensor| {
                dot(&r, &ops::depthwise_conv2d(xp, kp, stride, Padding::Same).unwrap())
            };
            worst(&mut results, "depthwise_conv2d", max_rel_err(&dx.unwrap(), &numeric_grad(&x, |xp| f(xp, &k))));
            worst(&mut results, "depthwise_conv2d", max_rel_err(&dk, &numeric_grad(&k, |kp| f(&x, kp))));
        }

        // batchnorm, train mode: gradient flows through the batch statistics.
        {
            let x = random(&[3, 2, 3, 3], &mut rng);
            let gamma = random(&[2], &mut rng);
            let beta = random(&[2], &mut rng);
            let (y, cache) = ops::batchnorm_train(&x, &gamma, &beta).unwrap();
            let r = random(y.shape(), &mut rng);
            let (dx, dg, db) = ops::batchnorm_train_backward(&r, &gamma, &cache).unwrap();
            let f = |xp: &Tensor, gp: &Tensor, bp: &Tensor| dot(&r, &ops::batchnorm_train(xp, gp, bp).unwrap().0);
            worst(&mut results, "batchnorm_train", max_rel_err(&dx, &numeric_grad(&x, |p| f(p, &gamma, &beta))));
            worst(&mut results, "batchnorm_train", max_rel_err(&dg, &numeric_grad(&gamma, |p| f(&x, p, &beta))));
            worst(&mut results, "batchnorm_train", max_rel_err(&db, &numeric_grad(&beta, |p| f(&x, &gamma, p))));
        }

        {
            let x = random(&[2, 2, 3, 2], &mut rng);
            let gamma = random(&[2], &mut rng);
            let beta = random(&[2], &mut rng);
            let mean = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let var = vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
            let y = ops::batchnorm_infer(&x, &gamma, &beta, &mean, &var).unwrap();
            let r = random(y.shape(), &mut rng);
            let (dx, dg, db) = ops::batchnorm_infer_backward(&x, &gamma, &mean, &var, &r).unwrap();
            let f = |xp: &Tensor, gp: &Tensor, bp: &Tensor| {
                dot(&r, &ops::batchnorm_infer(xp, gp, bp, &mean, &var).unwrap())
            };
            worst(&mut results, "batchnorm_infer", max_rel_err(&dx, &numeric_grad(&x, |p| f(p, &gamma, &beta))));
            worst(&mut results, "batchnorm_infer", max_rel_err(&dg, &numeric_grad(&gamma, |p| f(&x, p, &beta))));
            worst(&mut results, "batchnorm_infer", max_rel_err(&db, &numeric_grad(&beta, |p| f(&x, &gamma, p))));
        }

        {
            let mut x = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-2.0..8.0));
            avoid_kinks(&mut x, 10.0 * STEP);
            let r = random(x.shape(), &mut rng);
            let dx = ops::relu6_backward(&x, &r).unwrap();
            let nx = numeric_grad(&x, |p| dot(&r, &ops::relu6(p)));
            worst(&mut results, "relu6", max_rel_err(&dx, &nx));
        }

        for axis in 0..3 {
            let x = random(&[2, 3, 4], &mut rng);
            let y = ops::gap_over_axis(&x, axis).unwrap();
            let r = random(y.shape(), &mut rng);
            let dx = ops::gap_over_axis_backward(x.shape(), axis, &r).unwrap();
            let nx = numeric_grad(&x, |p| dot(&r, &ops::gap_over_axis(p, axis).unwrap()));
            worst(&mut results, "gap_over_axis", max_rel_err(&dx, &nx));
        }

        {
            let x = random(&[2, 2, 5], &mut rng);
            let valid = [3, 5];
            let y = ops::masked_mean_last(&x, &valid).unwrap();
            let r = random(y.shape(), &mut rng);
            let dx = ops::masked_mean_last_backward(x.shape(), &valid, &r).unwrap();
            let nx = numeric_grad(&x, |p| dot(&r, &ops::masked_mean_last(p, &valid).unwrap()));
            worst(&mut results, "masked_gap", max_rel_err(&dx, &nx));
        }

        for ksize in [1, 3] {
            let x = random(&[2, 3, 6], &mut rng);
            let k = random(&[2, 3, ksize], &mut rng);
            let b = random(&[2], &mut rng);
            let y = ops::conv1d(&x, &k, Some(&b)).unwrap();
            let r = random(y.shape(), &mut rng);
            let (dx, dk, db) = ops::conv1d_backward(&x, &k, Some(&b), &r, true).unwrap();
            let f = |xp: &Tensor, kp: &Tensor, bp: &Tensor| dot(&r, &ops::conv1d(xp, kp, Some(bp)).unwrap());
            worst(&mut results, "conv1d", max_rel_err(&dx.unwrap(), &numeric_grad(&x, |p| f(p, &k, &b))));
            worst(&mut results, "conv1d", max_rel_err(&dk, &numeric_grad(&k, |p| f(&x, p, &b))));
            worst(&mut results, "conv1d", max_rel_err(&db.unwrap(), &numeric_grad(&b, |p| f(&x, &k, p))));
        }

        {
            let z = random(&[4], &mut rng);
            let p = ops::softmax(z.data()).unwrap();
            let r = random(&[4], &mut rng);
            let dz = ops::softmax_backward(&p, r.data()).unwrap();
            let nz = numeric_grad(&z, |zp| {
                ops::softmax(zp.data()).unwrap().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            });
            worst(&mut results, "softmax", max_rel_err(&Tensor::new(vec![4], dz).unwrap(), &nz));
        }

        {
            let probs = Tensor::from_fn(&[3], |_| rng.random_range(0.1..0.9));
            let class = rng.random_range(0..3);
            let g = ops::cross_entropy_backward(probs.data(), class).unwrap();
            let n = numeric_grad(&probs, |p| ops::cross_entropy(p.data(), class).unwrap());
            worst(&mut results, "cross_entropy", max_rel_err(&Tensor::new(vec![3], g).unwrap(), &n));
        }

        {
            let logits = random(&[3, 2], &mut rng);
            let labels = [rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..2)];
            let (_, probs) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
            let g = ops::softmax_cross_entropy_backward(&probs, &labels, 1.0).unwrap();
            let n = numeric_grad(&logits, |l| ops::softmax_cross_entropy(l, &labels).unwrap().0);
            worst(&mut results, "softmax_cross_entropy", max_rel_err(&g, &n));
        }

        // Whole recorded graph: conv -> BN -> relu6 -> depthwise -> mask ->
        // GAP(freq) -> conv1d -> masked GAP(time) -> softmax-CE.
        {
            let x = random(&[2, 2, 4, 6], &mut rng);
            let k1 = random(&[3, 2, 3, 3], &mut rng);
            let gamma = random(&[3], &mut rng);
            let beta = Tensor::from_fn(&[3], |_| rng.random_range(1.0..2.0));
            let kd = random(&[3, 3, 3], &mut rng);
            let kh = random(&[2, 3, 1], &mut rng);
            let bh = random(&[2], &mut rng);
            let labels = [0usize, 1];
            let valid = [5usize, 6];
            let build = |params: [&Tensor; 6]| -> (Tape, [speechfcn::nncore::NodeId; 7]) {
                let mut tape = Tape::new();
                let xi = tape.leaf(x.clone(), false);
                let ids: Vec<_> = params.iter().map(|p| tape.leaf((*p).clone(), true)).collect();
                let c = tape.conv2d(xi, ids[0], 1, Padding::Same).unwrap();
                let bn = tape.batchnorm_train(c, ids[1], ids[2]).unwrap();
                let a = tape.relu6(bn);
                let d = tape.depthwise_conv2d(a, ids[3], 2, Padding::Same).unwrap();
                let m = tape.mask_columns(d, &[3, 2]).unwrap();
                let f = tape.mean_axis(m, 2).unwrap();
                let h = tape.conv1d(f, ids[4], Some(ids[5])).unwrap();
                let t = tape.masked_mean_last(h, &[valid[0].div_ceil(2), valid[1].div_ceil(2)]).unwrap();
                let loss = tape.softmax_cross_entropy(t, &labels).unwrap();
                (tape, [ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], loss])
            };
            let params = [&k1, &gamma, &beta, &kd, &kh, &bh];
            let (tape, ids) = build(params);
            let grads = tape.backward(ids[6]).unwrap();
            for (pi, param) in params.iter().enumerate() {
                let analytic = grads.get(ids[pi]).unwrap().clone();
                let numeric = numeric_grad(param, |p| {
                    let mut ps = params;
                    ps[pi] = p;
                    let (t, i) = build(ps);
                    t.value(i[6]).data()[0]
                });
                worst(&mut results, "tape_composite", max_rel_err(&analytic, &numeric));
            }
        }
    }
    results
}
