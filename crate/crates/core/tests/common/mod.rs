//! Independent scalar-loop oracles and shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use spotclip::loss::LossConfig;
use spotclip::nn::{DualEncoder, FeatureMap, Mode, Module};

pub fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Image-centric loss by explicit loops: targets from image-image
/// similarities, cross entropy on the transposed logits.
pub fn naive_image_centric(h_p: &Array2<f64>, h_s: &Array2<f64>, tau: f64) -> f64 {
    let (p, s) = (rows(h_p), rows(h_s));
    let n = p.len();
    let mut targets = vec![vec![0.0; n]; n];
    for i in 0..n {
        let sims: Vec<f64> = (0..n).map(|j| dot(&p[i], &p[j]) / tau).collect();
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sims.iter().map(|v| (v - m).exp()).sum();
        for j in 0..n {
            targets[i][j] = (sims[j] - m).exp() / z;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        // Row i of the transposed logits: spot j against patch i.
        let row: Vec<f64> = (0..n).map(|j| dot(&s[j], &p[i]) / tau).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..n {
            total -= targets[j][i] * (row[j] - lse);
        }
    }
    total / n as f64
}

/// Per-gene RMSE over spots; matrices are spots x genes.
pub fn naive_rmse(truth: &Array2<f64>, pred: &Array2<f64>) -> Vec<f64> {
    let (m, d) = truth.dim();
    (0..d)
        .map(|g| {
            let mut s = 0.0;
            for j in 0..m {
                s += (pred[[j, g]] - truth[[j, g]]).powi(2);
            }
            (s / m as f64).sqrt()
        })
        .collect()
}

/// Per-gene SSIM after independent max-scaling of both matrices.
pub fn naive_scaled_ssim(truth: &Array2<f64>, pred: &Array2<f64>, c1: f64, c2: f64) -> Vec<f64> {
    let (m, d) = truth.dim();
    let mut out = Vec::with_capacity(d);
    for g in 0..d {
        let mut u: Vec<f64> = (0..m).map(|j| truth[[j, g]]).collect();
        let mut v: Vec<f64> = (0..m).map(|j| pred[[j, g]]).collect();
        for col in [&mut u, &mut v] {
            let mx = col.iter().cloned().fold(0.0, f64::max);
            if mx > 0.0 {
                col.iter_mut().for_each(|x| *x /= mx);
            }
        }
        let mu = u.iter().sum::<f64>() / m as f64;
        let mv = v.iter().sum::<f64>() / m as f64;
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut cov = 0.0;
        for j in 0..m {
            su += (u[j] - mu).powi(2);
            sv += (v[j] - mv).powi(2);
            cov += (u[j] - mu) * (v[j] - mv);
        }
        let (su, sv, cov) = (su / m as f64, sv / m as f64, cov / m as f64);
        let num = (2.0 * mu * mv + c1 * c1) * (2.0 * cov + c2 * c2);
        let den = (mu * mu + mv * mv + c1 * c1) * (su + sv + c2 * c2);
        out.push(num / den);
    }
    out
}

/// Top-`t` index set by repeated arg-max, lower index on ties.
fn naive_top(row: &[f64], t: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::new();
    for _ in 0..t {
        let mut best: Option<usize> = None;
        for i in 0..row.len() {
            if !taken[i] && best.is_none_or(|b| row[i] > row[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("t <= len");
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn naive_hit(truth: &Array2<f64>, pred: &Array2<f64>, t: usize) -> f64 {
    let m = truth.nrows();
    let mut hits = 0;
    for j in 0..m {
        let a = naive_top(&truth.row(j).to_vec(), t);
        let b = naive_top(&pred.row(j).to_vec(), t);
        if a.iter().any(|g| b.contains(g)) {
            hits += 1;
        }
    }
    hits as f64 / m as f64
}

/// Full sort by (score desc, index asc), first `k`. Scores use ndarray's
/// row dot product so rounding matches the index under test; a scalar loop
/// sums in another order and can reorder near-ties one ulp apart.
pub fn exhaustive_topk(query: &[f64], bank: &Array2<f64>, k: usize) -> (Vec<usize>, Vec<f64>) {
    let q = ArrayView1::from(query);
    let mut all: Vec<(f64, usize)> = bank.outer_iter().enumerate().map(|(i, r)| (r.dot(&q), i)).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    (all.iter().map(|x| x.1).collect(), all.iter().map(|x| x.0).collect())
}

pub fn random_images(n: usize, rng: &mut impl Rng) -> Vec<FeatureMap> {
    (0..n)
        .map(|_| {
            let mut x = FeatureMap::zeros(256, 256, 3);
            x.data.iter_mut().for_each(|v| *v = rng.random());
            x
        })
        .collect()
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)` (Euclidean norms) per
/// trainable parameter block, analytic against central differences with
/// step `h`. The floor covers blocks whose exact gradient is zero, such as
/// a bias that shifts every logit of a softmax row equally.
pub fn gradient_check(
    model: &DualEncoder,
    images: &[FeatureMap],
    expressions: &Array2<f64>,
    loss: &LossConfig,
    mode: Mode,
    h: f64,
) -> BTreeMap<String, f64> {
    let (_, grad) = model
        .loss_and_gradients(images, expressions.view(), loss, mode)
        .expect("analytic gradients");
    let analytic: BTreeMap<String, Vec<f64>> = grad
        .named_params()
        .into_iter()
        .map(|p| (p.name, p.data.to_vec()))
        .collect();
    let mut probe = model.clone();
    let features = model.image_backbone(images).expect("features");
    let eval = |m: &DualEncoder, backbone: bool| {
        if backbone {
            m.batch_loss(images, expressions.view(), loss, mode).expect("loss")
        } else {
            m.loss_from_features(features.view(), expressions.view(), loss, mode).expect("loss")
        }
    };
    let mut out = BTreeMap::new();
    let names: Vec<(usize, String)> = model
        .named_params()
        .into_iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(b, p)| (b, p.name))
        .collect();
    for (b, name) in &names {
        let b = *b;
        let backbone = name.starts_with("image.backbone.");
        let len = analytic[name].len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let original = probe.named_params_mut()[b].data[i];
            probe.named_params_mut()[b].data[i] = original + h;
            let plus = eval(&probe, backbone);
            probe.named_params_mut()[b].data[i] = original - h;
            let minus = eval(&probe, backbone);
            probe.named_params_mut()[b].data[i] = original;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let a = &analytic[name];
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        out.insert(name.clone(), diff / scale.max(1e-8));
    }
    out
}
