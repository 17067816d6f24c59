//! Central finite-difference checks for every differentiable operation.
//!
//! The oracle perturbs one input coordinate at a time (step 1e-3) and
//! compares the numeric derivative against the autodiff gradient at a
//! relative tolerance of 1e-4, across 20 random seeds per operation.

use pfenet_core::tensor::{backward, concat_channels, Parameter};
use pfenet_core::{Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks autodiff gradients of `loss_fn` with respect to `values` against
/// central finite differences.
fn check_grad(name: &str, shape: &[usize], values: &[f64], loss_fn: impl Fn(&Tensor) -> Tensor) {
    let param = Parameter::new("x", Shape::new(shape).unwrap(), values.to_vec(), false);
    let loss = loss_fn(&param.tensor());
    let grads = backward(&loss).unwrap();
    let analytic = grads
        .get(param.id())
        .unwrap_or_else(|| panic!("{name}: no gradient reached the input"));

    let eval = |vals: &[f64]| -> f64 {
        let t = Tensor::from_vec(Shape::new(shape).unwrap(), vals.to_vec()).unwrap();
        loss_fn(&t).item().unwrap()
    };
    let mut perturbed = values.to_vec();
    for i in 0..values.len() {
        perturbed[i] = values[i] + STEP;
        let up = eval(&perturbed);
        perturbed[i] = values[i] - STEP;
        let down = eval(&perturbed);
        perturbed[i] = values[i];
        let numeric = (up - down) / (2.0 * STEP);
        let err = rel_err(analytic[i], numeric);
        assert!(
            err < REL_TOL,
            "{name}: coordinate {i}: autodiff {} vs numeric {numeric} (rel err {err:.3e})",
            analytic[i]
        );
    }
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
        let (h, w) = (rng.gen_range(3..6usize), rng.gen_range(3..6usize));
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let pad = if k == 3 { 1 } else { 0 };

        let x = random_values(&mut rng, cin * h * w);
        let wv = random_values(&mut rng, cout * cin * k * k);
        let bv = random_values(&mut rng, cout);

        let weight = Tensor::from_vec(Shape::new(&[cout, cin, k, k]).unwrap(), wv.clone()).unwrap();
        let bias = Tensor::from_vec(Shape::new(&[cout]).unwrap(), bv.clone()).unwrap();
        let input = Tensor::from_vec(Shape::new(&[1, cin, h, w]).unwrap(), x.clone()).unwrap();

        check_grad("conv2d/input", &[1, cin, h, w], &x, |t| {
            t.conv2d(&weight, &bias, 1, pad).unwrap().sum()
        });
        check_grad("conv2d/weight", &[cout, cin, k, k], &wv, |t| {
            input.conv2d(t, &bias, 1, pad).unwrap().sum()
        });
        check_grad("conv2d/bias", &[cout], &bv, |t| {
            input.conv2d(&weight, t, 1, pad).unwrap().sum()
        });
    }
}

#[test]
fn relu_gradients_away_from_zero() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(2..6usize) * rng.gen_range(2..6usize);
        // keep every coordinate at least 10 steps away from the kink
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.01..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        // relu alone has a trivial Jacobian; compose with conv to exercise
        // the chain
        check_grad("relu", &[1, 1, 1, n], &x, |t| t.relu().scale(1.7).sum());
    }
}

#[test]
fn pool_and_resize_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (h, w) = (rng.gen_range(2..6usize), rng.gen_range(2..6usize));
        let c = rng.gen_range(1..3usize);
        let x = random_values(&mut rng, c * h * w);
        let out = rng.gen_range(1..=h.min(w));
        check_grad("adaptive_avg_pool", &[1, c, h, w], &x, |t| {
            t.adaptive_avg_pool(out).unwrap().sum()
        });
        let (oh, ow) = (rng.gen_range(1..7usize), rng.gen_range(1..7usize));
        check_grad("bilinear_resize", &[1, c, h, w], &x, |t| {
            t.bilinear_resize(oh, ow).unwrap().sum()
        });
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let classes = rng.gen_range(2..4usize);
        let (h, w) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let x = random_values(&mut rng, classes * h * w);
        let target: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect();
        check_grad("softmax_cross_entropy", &[1, classes, h, w], &x, |t| {
            t.softmax_cross_entropy(&target).unwrap()
        });
    }
}

#[test]
fn elementwise_and_reduction_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let n = rng.gen_range(2..8usize);
        let x = random_values(&mut rng, n);
        let other =
            Tensor::from_vec(Shape::new(&[1, 1, 1, n]).unwrap(), random_values(&mut rng, n))
                .unwrap();
        check_grad("add", &[1, 1, 1, n], &x, |t| t.add(&other).unwrap().sum());
        check_grad("scale", &[1, 1, 1, n], &x, |t| t.scale(-0.37).sum());
        check_grad("concat", &[1, 1, 1, n], &x, |t| {
            concat_channels(&[t, &other]).unwrap().sum()
        });
        // diamond: same tensor used twice must accumulate both paths
        check_grad("shared-input", &[1, 1, 1, n], &x, |t| {
            t.add(t).unwrap().add(&t.scale(2.0)).unwrap().sum()
        });
    }
}

#[test]
fn mask_op_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (c, h, w) = (
            rng.gen_range(1..3usize),
            rng.gen_range(2..5usize),
            rng.gen_range(2..5usize),
        );
        let x = random_values(&mut rng, c * h * w);
        let mask_vals: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask = Tensor::from_vec(Shape::new(&[1, 1, h, w]).unwrap(), mask_vals).unwrap();
        check_grad("mul_mask", &[1, c, h, w], &x, |t| {
            t.mul_mask(&mask).unwrap().sum()
        });
        check_grad("masked_gap", &[1, c, h, w], &x, |t| {
            t.masked_gap(&mask, 1e-7).unwrap().sum()
        });
    }
}

#[test]
fn composed_pipeline_gradient() {
    // conv → relu → pool → resize → ce, checking the whole chain end to end
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = random_values(&mut rng, 2 * 4 * 4);
        let wv = random_values(&mut rng, 2 * 2 * 9);
        let bias = Tensor::from_vec(Shape::new(&[2]).unwrap(), random_values(&mut rng, 2)).unwrap();
        let target: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2u8)).collect();

        let input = Tensor::from_vec(Shape::new(&[1, 2, 4, 4]).unwrap(), x).unwrap();
        check_grad("pipeline/weight", &[2, 2, 3, 3], &wv, |t| {
            input
                .conv2d(t, &bias, 1, 1)
                .unwrap()
                .relu()
                .adaptive_avg_pool(2)
                .unwrap()
                .bilinear_resize(4, 4)
                .unwrap()
                .softmax_cross_entropy(&target)
                .unwrap()
        });
    }
}
