//! Finite-difference checks of every differentiable op and of both full
//! architectures against the f64 reference.

use rand::Rng;
use salient_core::cnn::{ops, ArchitectureSpec, Gradients, Network, Parameters, Tensor, Variant, Workspace};

use super::*;

pub const TRIALS: usize = 20;

fn tensor(shape: Vec<usize>, v: &[f64]) -> Tensor {
    Tensor::new(shape, to_f32(v)).unwrap()
}

/// Values bounded away from zero so ReLU kinks are rare.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Input, weight and bias gradients of `sum(r * conv(x))`.
pub fn conv2d(seed: u64) -> Tally {
    let mut t = Tally::default();
    for trial in 0..TRIALS {
        let mut rng = rng(seed + trial as u64);
        let c = rng.random_range(1..=3);
        let k = [1, 2, 3, 5][rng.random_range(0..4)];
        let stride = rng.random_range(1..=2);
        let (h, w) = (k + rng.random_range(0..6), k + rng.random_range(0..6));
        let o = rng.random_range(1..=3);
        let x = uniform(&mut rng, c * h * w, -1.0, 1.0);
        let wt = uniform(&mut rng, o * c * k * k, -1.0, 1.0);
        let b = uniform(&mut rng, o, -1.0, 1.0);
        let (out, oh, ow) = conv(&x, c, h, w, &wt, &b, o, k, stride);
        let r = uniform(&mut rng, out.len(), -1.0, 1.0);
        let objective = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
            let (y, _, _) = conv(x, c, h, w, wt, b, o, k, stride);
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let g = ops::conv2d_backward(
            &tensor(vec![c, h, w], &x),
            &tensor(vec![o, c, k, k], &wt),
            &tensor(vec![o], &b),
            stride,
            &tensor(vec![o, oh, ow], &r),
        )
        .unwrap();
        for i in 0..x.len() {
            t.add(
                || format!("conv input[{i}] trial {trial}"),
                check(g.input.values()[i] as f64, x[i], |v| {
                    let mut x2 = x.clone();
                    x2[i] = v;
                    objective(&x2, &wt, &b)
                }),
            );
        }
        for i in 0..wt.len() {
            t.add(
                || format!("conv weight[{i}] trial {trial}"),
                check(g.weight.values()[i] as f64, wt[i], |v| {
                    let mut w2 = wt.clone();
                    w2[i] = v;
                    objective(&x, &w2, &b)
                }),
            );
        }
        for i in 0..b.len() {
            t.add(
                || format!("conv bias[{i}] trial {trial}"),
                check(g.bias.values()[i] as f64, b[i], |v| {
                    let mut b2 = b.clone();
                    b2[i] = v;
                    objective(&x, &wt, &b2)
                }),
            );
        }
    }
    t
}

/// Elementwise op check: `sum(r * f(x))` against `backward(x, r)`.
fn elementwise(
    seed: u64,
    name: &str,
    gen: impl Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    f: impl Fn(f64) -> f64,
    backward: impl Fn(&Tensor, &Tensor) -> Tensor,
) -> Tally {
    let mut t = Tally::default();
    for trial in 0..TRIALS {
        let mut rng = rng(seed + trial as u64);
        let shape = vec![rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5)];
        let n: usize = shape.iter().product();
        let x = gen(&mut rng, n);
        let r = uniform(&mut rng, n, -1.0, 1.0);
        let g = backward(&tensor(shape.clone(), &x), &tensor(shape, &r));
        for i in 0..n {
            t.add(
                || format!("{name}[{i}] trial {trial}"),
                check(g.values()[i] as f64, x[i], |v| r[i] * f(v)),
            );
        }
    }
    t
}

pub fn relu(seed: u64) -> Tally {
    elementwise(
        seed,
        "relu",
        away_from_zero,
        |v| v.max(0.0),
        |x, r| ops::relu_backward(x, r).unwrap(),
    )
}

pub fn sigmoid(seed: u64) -> Tally {
    elementwise(
        seed,
        "sigmoid",
        |rng, n| uniform(rng, n, -4.0, 4.0),
        super::sigmoid,
        |x, r| ops::sigmoid_backward(&ops::sigmoid(x), r).unwrap(),
    )
}

pub fn maxpool(seed: u64) -> Tally {
    let mut t = Tally::default();
    for trial in 0..TRIALS {
        let mut rng = rng(seed + trial as u64);
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(2..=7), rng.random_range(2..=7));
        let x = uniform(&mut rng, c * h * w, -1.0, 1.0);
        let (oh, ow) = (h / 2, w / 2);
        let r = uniform(&mut rng, c * oh * ow, -1.0, 1.0);
        let xt = tensor(vec![c, h, w], &x);
        let (_, argmax) = ops::maxpool2x2(&xt).unwrap();
        let g = ops::maxpool2x2_backward(&[c, h, w], &argmax, &tensor(vec![c, oh, ow], &r)).unwrap();
        for i in 0..x.len() {
            t.add(
                || format!("maxpool[{i}] trial {trial}"),
                check(g.values()[i] as f64, x[i], |v| {
                    let mut x2 = x.clone();
                    x2[i] = v;
                    super::maxpool(&x2, c, h, w).iter().zip(&r).map(|(a, b)| a * b).sum()
                }),
            );
        }
    }
    t
}

pub fn global_avg_pool(seed: u64) -> Tally {
    let mut t = Tally::default();
    for trial in 0..TRIALS {
        let mut rng = rng(seed + trial as u64);
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
        let x = uniform(&mut rng, c * h * w, -1.0, 1.0);
        let r = uniform(&mut rng, c, -1.0, 1.0);
        let g = ops::global_avg_pool_backward(&[c, h, w], &tensor(vec![c], &r)).unwrap();
        for i in 0..x.len() {
            t.add(
                || format!("gap[{i}] trial {trial}"),
                check(g.values()[i] as f64, x[i], |v| {
                    let mut x2 = x.clone();
                    x2[i] = v;
                    gap(&x2, c, h * w).iter().zip(&r).map(|(a, b)| a * b).sum()
                }),
            );
        }
    }
    t
}

pub fn dense_layer(seed: u64) -> Tally {
    let mut t = Tally::default();
    for trial in 0..TRIALS {
        let mut rng = rng(seed + trial as u64);
        let (i_n, o_n) = (rng.random_range(1..=8), rng.random_range(1..=3));
        let x = uniform(&mut rng, i_n, -1.0, 1.0);
        let wt = uniform(&mut rng, o_n * i_n, -1.0, 1.0);
        let b = uniform(&mut rng, o_n, -1.0, 1.0);
        let r = uniform(&mut rng, o_n, -1.0, 1.0);
        let objective =
            |x: &[f64], wt: &[f64], b: &[f64]| -> f64 { dense(x, wt, b).iter().zip(&r).map(|(a, b)| a * b).sum() };
        let g = ops::dense_backward(
            &tensor(vec![i_n], &x),
            &tensor(vec![o_n, i_n], &wt),
            &tensor(vec![o_n], &b),
            &tensor(vec![o_n], &r),
        )
        .unwrap();
        let groups: [(&str, &Vec<f64>, &Tensor); 3] = [("input", &x, &g.input), ("weight", &wt, &g.weight), ("bias", &b, &g.bias)];
        for (which, vals, grad) in groups {
            for i in 0..vals.len() {
                t.add(
                    || format!("dense {which}[{i}] trial {trial}"),
                    check(grad.values()[i] as f64, vals[i], |v| {
                        let (mut x2, mut w2, mut b2) = (x.clone(), wt.clone(), b.clone());
                        match which {
                            "input" => x2[i] = v,
                            "weight" => w2[i] = v,
                            _ => b2[i] = v,
                        }
                        objective(&x2, &w2, &b2)
                    }),
                );
            }
        }
    }
    t
}

pub fn cross_entropy(seed: u64) -> Tally {
    let mut t = Tally::default();
    for trial in 0..TRIALS {
        let mut rng = rng(seed + trial as u64);
        let n = rng.random_range(1..=8);
        let p = uniform(&mut rng, n, 0.05, 0.95);
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let g = ops::binary_cross_entropy_backward(&to_f32(&p), &to_f32(&y)).unwrap();
        for i in 0..n {
            t.add(
                || format!("bce[{i}] trial {trial}"),
                check(g[i] as f64, p[i], |v| {
                    let mut p2 = p.clone();
                    p2[i] = v;
                    p2.iter().zip(&y).map(|(&a, &b)| bce(a, b)).sum::<f64>() / n as f64
                }),
            );
        }
    }
    t
}

/// Full-network parameter gradients for one sample. Each trial draws new
/// parameters, input and label, then checks `coords` random coordinates in
/// every parameter tensor.
///
/// The network is piecewise linear in each parameter: at the minimum input
/// side a 1e-3 nudge of a first-layer weight flips the sign of dozens of
/// ReLU inputs, so the central difference straddles kinks. The difference is
/// therefore taken on the linear piece active at the base point (ReLU masks
/// and pool winners frozen), which is where the analytic gradient is
/// defined. Coordinates whose free perturbation crosses a kink are counted in
/// `Tally::crossings`.
pub fn architecture(variant: Variant, seed: u64, trials: usize, coords: usize) -> Tally {
    let spec = ArchitectureSpec::new(variant, ArchitectureSpec::min_input_side(variant)).unwrap();
    let mut t = Tally::default();
    for trial in 0..trials {
        let mut rng = rng(seed + trial as u64);
        let mut params = Parameters::init(&spec, seed * 1000 + trial as u64);
        // Biases off zero so their gradients are exercised.
        for nt in &mut params.tensors {
            if nt.name.ends_with(".bias") {
                for v in nt.tensor.values_mut() {
                    *v = rng.random_range(-0.05..0.05);
                }
            }
        }
        let side = spec.input_side as usize;
        let input = to_f64(&to_f32(&uniform(&mut rng, side * side, 0.0, 1.0)));
        let label = if trial % 2 == 0 { 1.0 } else { 0.0 };

        let net = Network::new(&spec, &params).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        net.accumulate(&to_f32(&input), label as f32, &mut grads, &mut Workspace::default());

        let p64: Vec<Vec<f64>> = params.tensors.iter().map(|nt| to_f64(nt.tensor.values())).collect();
        let (_, base) = logit_with(&spec, &p64, &input, None);
        for (ti, nt) in params.tensors.iter().enumerate() {
            for _ in 0..coords {
                let i = rng.random_range(0..nt.tensor.len());
                let analytic = grads.tensors[ti][i] as f64;
                let perturbed = |v: f64| {
                    let mut p2 = p64.clone();
                    p2[ti][i] = v;
                    p2
                };
                let crosses = [EPS, -EPS]
                    .iter()
                    .any(|d| logit_with(&spec, &perturbed(p64[ti][i] + d), &input, None).1 != base);
                if crosses {
                    t.crossings += 1;
                }
                t.add(
                    || format!("{variant:?} {}[{i}] trial {trial}", nt.name),
                    check(analytic, p64[ti][i], |v| loss_frozen(&spec, &perturbed(v), &input, label, &base)),
                );
            }
        }
    }
    t
}

/// Every op, named, with its tally.
pub fn all_ops(seed: u64) -> Vec<(&'static str, Tally)> {
    vec![
        ("conv2d", conv2d(seed)),
        ("relu", relu(seed)),
        ("maxpool2x2", maxpool(seed)),
        ("global_avg_pool", global_avg_pool(seed)),
        ("dense", dense_layer(seed)),
        ("sigmoid", sigmoid(seed)),
        ("binary_cross_entropy", cross_entropy(seed)),
    ]
}
