//! Test oracles: a plain-loop f64 reference of the network and a central
//! finite-difference gradient checker.

#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use salient_core::cnn::ArchitectureSpec;

pub const EPS: f64 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    salient_core::seed::rng(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Valid cross-correlation, `[c, h, w]` input, `[o, c, k, k]` weight.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    o: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = bias[oc];
                for ic in 0..c {
                    for di in 0..k {
                        let xrow = &x[(ic * h + i * stride + di) * w + j * stride..];
                        let wrow = &weight[((oc * c + ic) * k + di) * k..];
                        for dj in 0..k {
                            s += xrow[dj] * wrow[dj];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Stride-1 convolution laid out for speed: accumulates whole output rows.
fn conv_fast(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], o: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(bias[oc]);
        for ic in 0..c {
            for di in 0..k {
                for dj in 0..k {
                    let wv = weight[((oc * c + ic) * k + di) * k + dj];
                    for i in 0..oh {
                        let src = &x[(ic * h + i + di) * w + dj..][..ow];
                        let dst = &mut plane[i * ow..(i + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// 2x2 max pooling, stride 2, odd edges dropped.
pub fn maxpool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let at = |di: usize, dj: usize| x[(ch * h + 2 * i + di) * w + 2 * j + dj];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

pub fn gap(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn dense(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(r, b)| b + x.iter().zip(&weight[r * x.len()..]).map(|(a, w)| a * w).sum::<f64>())
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn bce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// ReLU masks and max-pool winners of one forward pass, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub active: Vec<Vec<bool>>,
    pub winners: Vec<Vec<usize>>,
}

/// Network logit with parameters given per tensor in layout order. With
/// `frozen`, ReLU masks and pool winners are taken from it instead of being
/// recomputed, which evaluates the linear piece active at the base point.
pub fn logit_with(
    spec: &ArchitectureSpec,
    params: &[Vec<f64>],
    input: &[f64],
    frozen: Option<&Pattern>,
) -> (f64, Pattern) {
    let mut x = input.to_vec();
    let mut side = spec.input_side as usize;
    let mut ch = 1usize;
    let mut pattern = Pattern {
        active: Vec::new(),
        winners: Vec::new(),
    };
    for (i, l) in spec.layers.iter().enumerate() {
        let (o, k) = (l.out_channels as usize, l.kernel as usize);
        let mut y = conv_fast(&x, ch, side, side, &params[2 * i], &params[2 * i + 1], o, k);
        let active: Vec<bool> = match frozen {
            Some(f) => f.active[i].clone(),
            None => y.iter().map(|&v| v > 0.0).collect(),
        };
        for (v, &a) in y.iter_mut().zip(&active) {
            if !a {
                *v = 0.0;
            }
        }
        pattern.active.push(active);
        side = side - k + 1;
        ch = o;
        x = if l.pool {
            let winners = match frozen {
                Some(f) => f.winners[i].clone(),
                None => pool_winners(&y, ch, side, side),
            };
            let p = winners.iter().map(|&w| y[w]).collect();
            pattern.winners.push(winners);
            side /= 2;
            p
        } else {
            pattern.winners.push(Vec::new());
            y
        };
    }
    let f = gap(&x, ch, side * side);
    let n = params.len();
    (dense(&f, &params[n - 2], &params[n - 1])[0], pattern)
}

/// Flat index of each 2x2 window's maximum, first on ties.
fn pool_winners(x: &[f64], c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (ch * h + 2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let at = (ch * h + 2 * i + di) * w + 2 * j + dj;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

pub fn logit(spec: &ArchitectureSpec, params: &[Vec<f64>], input: &[f64]) -> f64 {
    logit_with(spec, params, input, None).0
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Unclamped cross-entropy of one sample, `softplus(z) - y*z`.
pub fn loss(spec: &ArchitectureSpec, params: &[Vec<f64>], input: &[f64], label: f64) -> f64 {
    let z = logit(spec, params, input);
    softplus(z) - label * z
}

/// [`loss`] on the linear piece selected by `frozen`.
pub fn loss_frozen(spec: &ArchitectureSpec, params: &[Vec<f64>], input: &[f64], label: f64, frozen: &Pattern) -> f64 {
    let z = logit_with(spec, params, input, Some(frozen)).0;
    softplus(z) - label * z
}

#[derive(Debug, Clone, Copy)]
pub enum Check {
    Passed(f64),
    Failed { analytic: f64, numeric: f64, rel: f64 },
    /// The two one-sided slopes disagree: a ReLU or max-pool kink lies
    /// within `EPS` and the central difference is meaningless.
    Kink,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with the central difference of `f` at `x0`.
pub fn check(analytic: f64, x0: f64, f: impl Fn(f64) -> f64) -> Check {
    let (fp, f0, fm) = (f(x0 + EPS), f(x0), f(x0 - EPS));
    let numeric = (fp - fm) / (2.0 * EPS);
    let (right, left) = ((fp - f0) / EPS, (f0 - fm) / EPS);
    if (right - left).abs() > 0.05 * right.abs().max(left.abs()).max(1e-2) {
        return Check::Kink;
    }
    let rel = rel_err(analytic, numeric);
    if rel < MAX_REL_ERR {
        Check::Passed(rel)
    } else {
        Check::Failed { analytic, numeric, rel }
    }
}

/// Aggregate over many coordinates.
#[derive(Debug, Default, Clone)]
pub struct Tally {
    pub checked: usize,
    /// Coordinates skipped because the central difference straddled a kink.
    pub kinks: usize,
    /// Coordinates checked on a frozen linear piece whose free perturbation
    /// would have crossed a kink.
    pub crossings: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

impl Tally {
    pub fn add(&mut self, what: impl FnOnce() -> String, c: Check) {
        match c {
            Check::Passed(rel) => {
                self.checked += 1;
                self.max_rel = self.max_rel.max(rel);
            }
            Check::Failed { analytic, numeric, rel } => {
                self.checked += 1;
                self.max_rel = self.max_rel.max(rel);
                self.failures
                    .push(format!("{}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}", what()));
            }
            Check::Kink => self.kinks += 1,
        }
    }

    pub fn merge(&mut self, o: Tally) {
        self.checked += o.checked;
        self.kinks += o.kinks;
        self.crossings += o.crossings;
        self.max_rel = self.max_rel.max(o.max_rel);
        self.failures.extend(o.failures);
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0 && self.kinks * 4 < self.checked
    }
}
