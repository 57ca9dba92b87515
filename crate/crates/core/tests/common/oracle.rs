//! Plain-loop reference implementations, independent of the autodiff graph.
//! Parameters are read from a store by name.

#![allow(dead_code)]

use sasv_core::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-8;
pub const BN_EPS: f64 = 1e-5;
pub const STD_EPS: f64 = 1e-8;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| (0..c).map(|j| t.get2(i, j)).collect()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn p_mat(s: &ParamStore, name: &str) -> Mat {
    to_mat(s.by_name(name).unwrap_or_else(|_| panic!("missing {name}")))
}

fn p_vec(s: &ParamStore, name: &str) -> Vec<f64> {
    s.by_name(name)
        .unwrap_or_else(|_| panic!("missing {name}"))
        .data()
        .to_vec()
}

/// `W x + b` with `W` stored `[out × in]`.
pub fn affine(s: &ParamStore, prefix: &str, x: &[f64], bias: bool) -> Vec<f64> {
    let w = p_mat(s, &format!("{prefix}.weight"));
    let mut y: Vec<f64> = w
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            for j in 0..x.len() {
                acc += row[j] * x[j];
            }
            acc
        })
        .collect();
    if bias {
        let b = p_vec(s, &format!("{prefix}.bias"));
        for i in 0..y.len() {
            y[i] += b[i];
        }
    }
    y
}

pub fn layer_norm(s: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let g = p_vec(s, &format!("{prefix}.gain"));
    let b = p_vec(s, &format!("{prefix}.bias"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + LN_EPS).sqrt();
    (0..x.len()).map(|i| g[i] * (x[i] - mean) / sd + b[i]).collect()
}

/// Eval-mode batch norm of one vector from running statistics.
pub fn batch_norm_eval(s: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let g = p_vec(s, &format!("{prefix}.gain"));
    let b = p_vec(s, &format!("{prefix}.bias"));
    let m = p_vec(s, &format!("{prefix}.running_mean"));
    let v = p_vec(s, &format!("{prefix}.running_var"));
    (0..x.len())
        .map(|i| g[i] * (x[i] - m[i]) / (v[i] + BN_EPS).sqrt() + b[i])
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Weighted mean and standard deviation, two-pass.
pub fn weighted_stats(h: &Mat, alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = h[0].len();
    let mut mu = vec![0.0; d];
    for (t, row) in h.iter().enumerate() {
        for j in 0..d {
            mu[j] += alpha[t] * row[j];
        }
    }
    let mut var = vec![0.0; d];
    for (t, row) in h.iter().enumerate() {
        for j in 0..d {
            var[j] += alpha[t] * (row[j] - mu[j]) * (row[j] - mu[j]);
        }
    }
    (mu, var.iter().map(|v| (v + STD_EPS).sqrt()).collect())
}

pub fn stats(h: &Mat) -> (Vec<f64>, Vec<f64>) {
    let t = h.len();
    weighted_stats(h, &vec![1.0 / t as f64; t])
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub struct AttentionRef {
    pub frames: Mat,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// One serialized layer's self-attention module on one utterance.
pub fn attention_module(s: &ParamStore, layer: &str, h: &Mat) -> AttentionRef {
    let x: Mat = h
        .iter()
        .map(|r| layer_norm(s, &format!("{layer}.attn_norm"), r))
        .collect();
    let (m0, s0) = stats(&x);
    let q = affine(s, &format!("{layer}.query"), &concat(&m0, &s0), false);
    let dk = q.len() as f64;
    let scores: Vec<f64> = x
        .iter()
        .map(|xt| {
            let k = affine(s, &format!("{layer}.key"), xt, false);
            k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt()
        })
        .collect();
    let alpha = softmax(&scores);
    let (mu, sigma) = weighted_stats(&x, &alpha);
    let r = affine(s, &format!("{layer}.residual"), &mu, true);
    let frames = h
        .iter()
        .map(|row| row.iter().zip(&r).map(|(a, b)| a + b).collect())
        .collect();
    AttentionRef {
        frames,
        mu,
        sigma,
        alpha,
    }
}

pub fn ffw_module(s: &ParamStore, layer: &str, h: &Mat) -> Mat {
    h.iter()
        .map(|row| {
            let x = layer_norm(s, &format!("{layer}.ffw_norm"), row);
            let a = relu(&affine(s, &format!("{layer}.ffw1"), &x, true));
            let y = affine(s, &format!("{layer}.ffw2"), &a, true);
            row.iter().zip(&y).map(|(p, q)| p + q).collect()
        })
        .collect()
}

/// `(Σ heads, BatchNorm(ReLU(Σ heads)))` of an eval-mode stack.
pub fn serialized_embed(s: &ParamStore, stack: &str, layers: usize, h: &Mat) -> (Vec<f64>, Vec<f64>) {
    let mut frames = h.clone();
    let mut sum: Option<Vec<f64>> = None;
    for n in 0..layers {
        let layer = format!("{stack}.layer{n}");
        let att = attention_module(s, &layer, &frames);
        let head = affine(s, &format!("{layer}.head"), &concat(&att.mu, &att.sigma), true);
        sum = Some(match sum {
            Some(acc) => acc.iter().zip(&head).map(|(a, b)| a + b).collect(),
            None => head,
        });
        frames = ffw_module(s, &layer, &att.frames);
    }
    let e = sum.expect("at least one layer");
    let a = batch_norm_eval(s, &format!("{stack}.out_bn"), &relu(&e));
    (e, a)
}

/// Largest `|a - b| / max(|b|, 1)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Every distinct score plus +∞ as threshold, counts by direct scan.
/// Returns `(threshold, p_miss, p_fa)` in increasing threshold order.
pub fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64, f64)> {
    let tar = labels.iter().filter(|&&l| l).count() as f64;
    let non = labels.len() as f64 - tar;
    let mut th: Vec<f64> = scores.to_vec();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::INFINITY);
    th.iter()
        .map(|&t| {
            let mut miss = 0.0;
            let mut fa = 0.0;
            for (s, &l) in scores.iter().zip(labels) {
                if l && *s < t {
                    miss += 1.0;
                }
                if !l && *s >= t {
                    fa += 1.0;
                }
            }
            (t, miss / tar, fa / non)
        })
        .collect()
}

/// EER from the brute-force sweep: first point with `p_miss >= p_fa`,
/// linearly interpolated from its predecessor.
pub fn brute_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let pts = sweep(scores, labels);
    for i in 0..pts.len() {
        let (_, m1, f1) = pts[i];
        if m1 >= f1 {
            if m1 == f1 || i == 0 {
                return m1;
            }
            let (_, m0, f0) = pts[i - 1];
            // solve m0 + s (m1 - m0) = f0 + s (f1 - f0)
            let s = (f0 - m0) / ((m1 - m0) - (f1 - f0));
            return m0 + s * (m1 - m0);
        }
    }
    unreachable!("reject-all point always crosses")
}

pub fn brute_min_dcf(scores: &[f64], labels: &[bool], p: f64) -> f64 {
    let norm = p.min(1.0 - p);
    sweep(scores, labels)
        .iter()
        .map(|&(_, m, f)| (m * p + f * (1.0 - p)) / norm)
        .fold(f64::INFINITY, f64::min)
}

/// Overwrites every stored tensor with random values so norms, biases and
/// running statistics all differ from their defaults.
pub fn randomize(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in ids {
        // Gains stay away from zero: a near-zero gain flattens a feature
        // to the σ floor, where finite differences lose accuracy.
        let range = if name.ends_with("running_var") || name.ends_with(".gain") {
            0.5..1.5
        } else {
            -0.8..0.8
        };
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(range.clone());
        }
    }
}

pub fn rand_frames(rng: &mut rand_chacha::ChaCha8Rng, t: usize, d: usize) -> Mat {
    use rand::Rng;
    (0..t)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}
