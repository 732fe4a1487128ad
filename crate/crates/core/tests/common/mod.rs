//! Helpers shared by the integration suites: finite-difference checks and
//! small fixtures.

#![allow(dead_code)]

use bodyscene::nets::{domain_loss, InitConfig, InputMode, ModelSpec, Network, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorcore::gradcheck::{numeric_gradient, relative_error};
use tensorcore::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
/// Deep nets have relu inputs within 1e-3 of zero that a wider probe straddles.
pub const NET_FD_STEP: f64 = 1e-6;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

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

/// Worst relative error of `d(sum(f(x) * r))/dx_j` against central differences.
pub fn fd_error(
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
        tape.value(out)
            .data()
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
        let numeric = numeric_gradient(&inputs[j], FD_STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[j] = probe.clone();
            eval(&xs)
        });
        worst = worst.max(relative_error(analytic.data(), &numeric, 1e-8));
    }
    worst
}

/// Random shapes for every primitive. Returns `(configurations, worst error)`.
pub fn primitive_sweep(seed: u64, rounds: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut configs, mut worst) = (0usize, 0.0f64);
    let mut note = |e: f64| {
        configs += 1;
        worst = worst.max(e);
    };
    for _ in 0..rounds {
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
        note(fd_error(&[x, kern], &mut rng, |t, v| {
            t.conv2d(v[0], v[1], stride, pad).unwrap()
        }));

        let x = away_from_zero(&mut rng, &[n, c, h, w]);
        note(fd_error(&[x], &mut rng, |t, v| t.relu(v[0])));

        let x = distinct(&mut rng, &[n, c, h + h % 2, w + w % 2]);
        note(fd_error(&[x], &mut rng, |t, v| t.max_pool2(v[0]).unwrap()));

        let x = random(&mut rng, &[n, c, h, w]);
        note(fd_error(&[x], &mut rng, |t, v| {
            t.global_avg_pool(v[0]).unwrap()
        }));

        let d = rng.random_range(1..6);
        let classes = rng.random_range(2..5);
        let (x, wt, b) = (
            random(&mut rng, &[n, d]),
            random(&mut rng, &[classes, d]),
            random(&mut rng, &[classes]),
        );
        note(fd_error(&[x, wt, b], &mut rng, |t, v| {
            t.dense(v[0], v[1], v[2]).unwrap()
        }));

        let (a, b) = (
            random(&mut rng, &[n, c, h, w]),
            random(&mut rng, &[n, c, h, w]),
        );
        note(fd_error(&[a.clone(), b.clone()], &mut rng, |t, v| {
            t.add(v[0], v[1]).unwrap()
        }));
        note(fd_error(&[a, b], &mut rng, |t, v| {
            t.mul(v[0], v[1]).unwrap()
        }));

        let logits = random(&mut rng, &[n, classes]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        note(fd_error(&[logits], &mut rng, |t, v| {
            t.softmax_cross_entropy(v[0], &labels).unwrap()
        }));
    }
    (configs, worst)
}

/// A two-stage stream small enough for a full finite-difference sweep.
pub fn tiny_spec(topology: Topology, num_classes: usize) -> ModelSpec {
    ModelSpec {
        stem_width: 3,
        stage_widths: vec![3, 4],
        blocks_per_stage: 1,
        ..ModelSpec::new(topology, InputMode::Frames, num_classes)
    }
}

/// Worst relative error of the loss gradient over every parameter of a
/// two-stage network, in `f64`.
pub fn network_fd_error(topology: Topology, seed: u64) -> f64 {
    let k = 3;
    let spec = tiny_spec(topology, k);
    let net = Network::<f64>::init(&spec, InitConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let xb = random(&mut rng, &[2, 3, 12, 12]);
    let xg = random(&mut rng, &[2, 3, 12, 12]);
    let labels = [0usize, 2];
    let loss_of = |net: &Network<f64>, tape: &mut Tape<f64>| -> Var {
        let b = tape.leaf(xb.clone(), false);
        match topology {
            Topology::Baseline => {
                let logits = net.baseline_forward(tape, b).unwrap();
                tape.softmax_cross_entropy(logits, &labels).unwrap()
            }
            Topology::DomainNet => {
                let g = tape.leaf(xg.clone(), false);
                let logits = net.domainnet_forward(tape, b, g).unwrap();
                domain_loss(tape, logits, &labels).unwrap().total
            }
        }
    };
    let mut tape = Tape::new();
    let loss = loss_of(&net, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut with_grads = net.clone();
    grads.store_into(&mut with_grads.params);
    let ids: Vec<_> = net.params.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = with_grads.params.get(id).grad.clone().unwrap();
        let numeric = numeric_gradient(net.params.value(id), NET_FD_STEP, |probe| {
            let mut probed = net.clone();
            probed.params.get_mut(id).value = probe.clone();
            let mut tape = Tape::new();
            let l = loss_of(&probed, &mut tape);
            tape.value(l).data()[0]
        });
        worst = worst.max(relative_error(analytic.data(), &numeric, 1e-8));
    }
    worst
}
