//! Finite-difference verification of every primitive's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorcore::gradcheck::{numeric_gradient, relative_error};
use tensorcore::{Tape, Tensor, Var};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so a relu kink is never straddled by the FD step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond the FD step, so max-pool winners never swap.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| {
        order[i] as f64 * 0.01 - n as f64 * 0.005
    })
}

/// Checks d(sum(f(inputs) * r))/d(input_j) for every input against central differences.
fn check(
    name: &str,
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        random(rng, tape.value(out).shape())
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        let v = tape.value(out);
        v.data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let r = tape.leaf(projection.clone(), false);
    let weighted = tape.mul(out, r).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (j, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(&tape, *var)
            .unwrap_or_else(|| Tensor::zeros(inputs[j].shape()));
        let numeric = numeric_gradient(&inputs[j], STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[j] = probe.clone();
            eval(&xs)
        });
        let err = relative_error(analytic.data(), &numeric, 1e-8);
        assert!(err <= TOL, "{name}: input {j} relative error {err:.3e}");
        worst = worst.max(err);
    }
    worst
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut configs = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let f = rng.random_range(1..4);
        let h = rng.random_range(3..7);
        let w = rng.random_range(3..7);
        let k = rng.random_range(1..4usize).min(h).min(w);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let x = random(&mut rng, &[n, c, h, w]);
        let kern = random(&mut rng, &[f, c, k, k]);
        check("conv2d", &[x, kern], &mut rng, |t, v| {
            t.conv2d(v[0], v[1], stride, pad).unwrap()
        });
        configs += 1;

        let x = away_from_zero(&mut rng, &[n, c, h, w]);
        check("relu", &[x], &mut rng, |t, v| t.relu(v[0]));
        configs += 1;

        let x = distinct(&mut rng, &[n, c, 2 * h / 2 + 2, 2 * w / 2 + 2]);
        check("max_pool2", &[x], &mut rng, |t, v| {
            t.max_pool2(v[0]).unwrap()
        });
        configs += 1;

        let x = random(&mut rng, &[n, c, h, w]);
        check("global_avg_pool", &[x], &mut rng, |t, v| {
            t.global_avg_pool(v[0]).unwrap()
        });
        configs += 1;

        let d = rng.random_range(1..6);
        let classes = rng.random_range(2..5);
        let (x, wt, b) = (
            random(&mut rng, &[n, d]),
            random(&mut rng, &[classes, d]),
            random(&mut rng, &[classes]),
        );
        check("dense", &[x, wt, b], &mut rng, |t, v| {
            t.dense(v[0], v[1], v[2]).unwrap()
        });
        configs += 1;

        let (a, b) = (
            random(&mut rng, &[n, c, h, w]),
            random(&mut rng, &[n, c, h, w]),
        );
        check("add", &[a.clone(), b.clone()], &mut rng, |t, v| {
            t.add(v[0], v[1]).unwrap()
        });
        check("mul", &[a, b], &mut rng, |t, v| t.mul(v[0], v[1]).unwrap());
        configs += 2;

        let c2 = rng.random_range(1..4);
        let (a, b) = (
            random(&mut rng, &[n, c, h, w]),
            random(&mut rng, &[n, c2, h, w]),
        );
        check("concat_channels", &[a, b], &mut rng, |t, v| {
            t.concat_channels(&[v[0], v[1]]).unwrap()
        });
        let (a, b) = (random(&mut rng, &[c, h, w]), random(&mut rng, &[c, h, w]));
        check("stack", &[a, b], &mut rng, |t, v| {
            t.stack(&[v[0], v[1]]).unwrap()
        });
        configs += 2;

        let logits = random(&mut rng, &[n, classes]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        check("softmax_cross_entropy", &[logits], &mut rng, |t, v| {
            t.softmax_cross_entropy(v[0], &labels).unwrap()
        });
        configs += 1;
    }
    assert!(configs >= 100, "only {configs} configurations checked");
}

#[test]
fn two_layer_conv_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x = random(&mut rng, &[2, 2, 6, 6]);
        let k1 = random(&mut rng, &[3, 2, 3, 3]);
        let k2 = random(&mut rng, &[2, 3, 3, 3]);
        let labels = [1usize, 0];
        check("conv-relu-conv-gap-ce", &[k1, k2, x], &mut rng, |t, v| {
            let h = t.conv2d(v[2], v[0], 1, 1).unwrap();
            let h = t.relu(h);
            let h = t.conv2d(h, v[1], 1, 1).unwrap();
            let pooled = t.global_avg_pool(h).unwrap();
            t.softmax_cross_entropy(pooled, &labels).unwrap()
        });
    }
}
