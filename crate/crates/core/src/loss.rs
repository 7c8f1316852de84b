//! Contrastive objectives over a batch of paired patch (`h_p`) and spot
//! (`h_s`) embeddings.
//!
//! All variants share one shape: logits `L = h_s h_pᵀ / τ` scored against
//! soft targets built from a similarity matrix, using
//! `CE(P, Q)_i = -Σ_j Q_ij · log_softmax(P_i)_j`.
//!
//! * `image_centric`: targets `softmax(h_p h_pᵀ / τ)`; only the image-side
//!   term `mean CE(Lᵀ, Tᵀ)` is kept. The spot-side term `mean CE(L, T)` can be
//!   mixed back in with `spot_loss_weight` (default 0, i.e. removed).
//! * `clip_soft`: targets from the average of both intra-modal
//!   similarities; both terms averaged.
//! * `clip_hard`: identity targets; both terms averaged.
//!
//! Gradients flow through the soft targets as well as the logits.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    ImageCentric,
    ClipSoft,
    ClipHard,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::ImageCentric => "image_centric",
            LossMode::ClipSoft => "clip_soft",
            LossMode::ClipHard => "clip_hard",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_centric" => Ok(LossMode::ImageCentric),
            "clip_soft" => Ok(LossMode::ClipSoft),
            "clip_hard" => Ok(LossMode::ClipHard),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub mode: LossMode,
    /// Weight of the spot-side term in `image_centric` mode.
    #[serde(default)]
    pub spot_loss_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            mode: LossMode::ImageCentric,
            spot_loss_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn with_mode(mode: LossMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.spot_loss_weight) {
            return Err(Error::InvalidConfig("spot_loss_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_finite(x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(what.to_string()))
    }
}

/// Per-row soft-target cross entropy.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if logits.dim() != targets.dim() {
        return Err(Error::shape(
            "cross_entropy targets",
            format!("{:?}", logits.dim()),
            format!("{:?}", targets.dim()),
        ));
    }
    check_finite(logits, "cross_entropy logits")?;
    check_finite(targets, "cross_entropy targets")?;
    let logp = log_softmax_rows(logits);
    Ok((&logp * &targets).sum_axis(Axis(1)).mapv(|v| -v))
}

fn check_pair(h_p: ArrayView2<'_, f64>, h_s: ArrayView2<'_, f64>) -> Result<()> {
    if h_p.dim() != h_s.dim() {
        return Err(Error::shape(
            "contrastive loss embeddings",
            format!("{:?}", h_p.dim()),
            format!("{:?}", h_s.dim()),
        ));
    }
    if h_p.nrows() == 0 {
        return Err(Error::EmptyInput("contrastive loss batch".into()));
    }
    check_finite(h_p, "patch embeddings")?;
    check_finite(h_s, "spot embeddings")
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// dLoss/dh_p
    pub grad_image: Array2<f64>,
    /// dLoss/dh_s
    pub grad_spot: Array2<f64>,
    /// Soft targets of this evaluation (rows sum to one).
    pub targets: Array2<f64>,
}

/// Gradients of `c · mean_i CE(P, Q)_i` with respect to `P` and `Q`.
fn cross_entropy_backward(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, c: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n = p.nrows() as f64;
    let logp = log_softmax_rows(p);
    let value = -(&logp * &q).sum() / n * c;
    let mut dp = logp.mapv(f64::exp);
    for (mut row, qrow) in dp.axis_iter_mut(Axis(0)).zip(q.axis_iter(Axis(0))) {
        let mass = qrow.sum();
        row.zip_mut_with(&qrow, |s, &t| *s = (*s * mass - t) * c / n);
    }
    let dq = logp.mapv(|v| -v * c / n);
    (value, dp, dq)
}

fn softmax_backward_rows(t: &Array2<f64>, dt: &Array2<f64>) -> Array2<f64> {
    let mut ds = t.clone();
    for ((mut row, trow), drow) in ds.axis_iter_mut(Axis(0)).zip(t.axis_iter(Axis(0))).zip(dt.axis_iter(Axis(0))) {
        let inner = trow.dot(&drow);
        row.zip_mut_with(&drow, |s, &g| *s *= g - inner);
    }
    ds
}

/// Loss value and gradients for any configured mode.
pub fn loss_with_gradients(h_p: ArrayView2<'_, f64>, h_s: ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_pair(h_p, h_s)?;
    let tau = cfg.temperature;
    let n = h_p.nrows();
    let logits = h_s.dot(&h_p.t()) / tau;

    let (sim, targets) = match cfg.mode {
        LossMode::ImageCentric => {
            let sim = h_p.dot(&h_p.t()) / tau;
            let t = softmax_rows(sim.view());
            (Some(sim), t)
        }
        LossMode::ClipSoft => {
            let sim = (h_p.dot(&h_p.t()) + h_s.dot(&h_s.t())) / (2.0 * tau);
            let t = softmax_rows(sim.view());
            (Some(sim), t)
        }
        LossMode::ClipHard => (None, Array2::eye(n)),
    };
    let (image_weight, spot_weight) = match cfg.mode {
        LossMode::ImageCentric => {
            let w = cfg.spot_loss_weight;
            (1.0 / (1.0 + w), w / (1.0 + w))
        }
        LossMode::ClipSoft | LossMode::ClipHard => (0.5, 0.5),
    };

    let mut value = 0.0;
    let mut d_logits = Array2::<f64>::zeros((n, n));
    let mut d_targets = Array2::<f64>::zeros((n, n));
    {
        let (v, dp, dq) = cross_entropy_backward(logits.t(), targets.t(), image_weight);
        value += v;
        d_logits += &dp.t();
        d_targets += &dq.t();
    }
    if spot_weight > 0.0 {
        let (v, dp, dq) = cross_entropy_backward(logits.view(), targets.view(), spot_weight);
        value += v;
        d_logits += &dp;
        d_targets += &dq;
    }

    let mut grad_spot = d_logits.dot(&h_p) / tau;
    let mut grad_image = d_logits.t().dot(&h_s) / tau;
    if sim.is_some() {
        let ds = softmax_backward_rows(&targets, &d_targets);
        let sym = &ds + &ds.t();
        match cfg.mode {
            LossMode::ImageCentric => grad_image += &(sym.dot(&h_p) / tau),
            LossMode::ClipSoft => {
                grad_image += &(sym.dot(&h_p) / (2.0 * tau));
                grad_spot += &(sym.dot(&h_s) / (2.0 * tau));
            }
            LossMode::ClipHard => unreachable!(),
        }
    }

    Ok(LossOutput {
        value,
        grad_image,
        grad_spot,
        targets,
    })
}

/// Image-centric contrastive loss (spot-side term removed).
pub fn image_centric_loss(h_p: ArrayView2<'_, f64>, h_s: ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<f64> {
    let cfg = LossConfig {
        mode: LossMode::ImageCentric,
        ..*cfg
    };
    check_pair(h_p, h_s)?;
    cfg.validate()?;
    let tau = cfg.temperature;
    let logits = h_s.dot(&h_p.t()) / tau;
    let targets = softmax_rows((h_p.dot(&h_p.t()) / tau).view());
    let mut value = cross_entropy(logits.t(), targets.t())?.mean().expect("non-empty batch");
    if cfg.spot_loss_weight > 0.0 {
        let w = cfg.spot_loss_weight;
        let spot = cross_entropy(logits.view(), targets.view())?.mean().expect("non-empty batch");
        value = (value + w * spot) / (1.0 + w);
    }
    Ok(value)
}

/// Symmetric CLIP-style baseline (`clip_soft` or `clip_hard`).
pub fn clip_baseline_loss(h_p: ArrayView2<'_, f64>, h_s: ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<f64> {
    check_pair(h_p, h_s)?;
    cfg.validate()?;
    let tau = cfg.temperature;
    let n = h_p.nrows();
    let logits = h_s.dot(&h_p.t()) / tau;
    let targets = match cfg.mode {
        LossMode::ClipHard => Array2::eye(n),
        _ => softmax_rows(((h_p.dot(&h_p.t()) + h_s.dot(&h_s.t())) / (2.0 * tau)).view()),
    };
    let spot = cross_entropy(logits.view(), targets.view())?;
    let image = cross_entropy(logits.t(), targets.t())?;
    Ok(((spot + image) / 2.0).mean().expect("non-empty batch"))
}

/// Value of the configured loss.
pub fn loss_value(h_p: ArrayView2<'_, f64>, h_s: ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<f64> {
    match cfg.mode {
        LossMode::ImageCentric => image_centric_loss(h_p, h_s, cfg),
        LossMode::ClipSoft | LossMode::ClipHard => clip_baseline_loss(h_p, h_s, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Scalar double-loop transcription of the image-centric loss, kept
    /// free of the matrix helpers above.
    fn naive_image_centric(hp: &[Vec<f64>], hs: &[Vec<f64>], tau: f64) -> f64 {
        let n = hp.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut targets = vec![vec![0.0; n]; n];
        for i in 0..n {
            let z: f64 = (0..n).map(|j| (dot(&hp[i], &hp[j]) / tau).exp()).sum();
            for j in 0..n {
                targets[i][j] = (dot(&hp[i], &hp[j]) / tau).exp() / z;
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            // row i of logits.T: image i against every spot j
            let row: Vec<f64> = (0..n).map(|j| dot(&hs[j], &hp[i]) / tau).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..n {
                total -= targets[j][i] * (row[j].exp() / z).ln();
            }
        }
        total / n as f64
    }

    fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn equal_logits_give_ln_n() {
        let ce = cross_entropy(Array2::zeros((4, 4)).view(), Array2::from_elem((4, 4), 0.25).view()).unwrap();
        for v in ce {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_row() {
        let ce = cross_entropy(array![[10.0, 0.0, 0.0]].view(), array![[1.0, 0.0, 0.0]].view()).unwrap();
        let expected = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((ce[0] - expected).abs() < 1e-15);
        assert!((ce[0] - 9.080e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_limit_is_zero() {
        let ce = cross_entropy(array![[500.0, 0.0]].view(), array![[1.0, 0.0]].view()).unwrap();
        assert!(ce[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_input() {
        assert!(matches!(
            cross_entropy(Array2::zeros((2, 2)).view(), Array2::zeros((2, 3)).view()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            cross_entropy(array![[f64::NAN, 0.0]].view(), array![[1.0, 0.0]].view()),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn single_pair_is_zero() {
        let cfg = LossConfig::default();
        let v = image_centric_loss(array![[0.3, -2.0]].view(), array![[5.0, 1.0]].view(), &cfg).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn orthonormal_pair() {
        let e = Array2::<f64>::eye(2);
        let v = image_centric_loss(e.view(), e.view(), &LossConfig::default()).unwrap();
        let naive = naive_image_centric(&rows(&e), &rows(&e), 1.0);
        assert!((v - naive).abs() < 1e-14);
        assert!((v - 0.58218).abs() < 1e-4);
        let out = loss_with_gradients(e.view(), e.view(), &LossConfig::default()).unwrap();
        assert!((out.targets[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((out.targets[[0, 1]] - 0.2689).abs() < 1e-4);
        assert!((out.value - v).abs() < 1e-14);
    }

    #[test]
    fn clip_soft_matches_image_centric_when_modalities_coincide() {
        let e = Array2::<f64>::eye(2);
        let soft = clip_baseline_loss(e.view(), e.view(), &LossConfig::with_mode(LossMode::ClipSoft)).unwrap();
        let ic = image_centric_loss(e.view(), e.view(), &LossConfig::default()).unwrap();
        assert!((soft - ic).abs() < 1e-14);
    }

    #[test]
    fn clip_hard_limits() {
        let cfg = LossConfig::with_mode(LossMode::ClipHard);
        let z = Array2::<f64>::zeros((4, 3));
        let v = clip_baseline_loss(z.view(), z.view(), &cfg).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let big = Array2::<f64>::eye(3) * 40.0;
        let v = clip_baseline_loss(big.view(), big.view(), &cfg).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn spot_weight_mixes_in_spot_term() {
        let hp = array![[1.0, 0.2], [0.1, 0.9], [0.5, -0.5]];
        let hs = array![[0.8, 0.1], [0.0, 1.2], [0.3, 0.3]];
        let base = LossConfig::default();
        let mixed = LossConfig {
            spot_loss_weight: 1.0,
            ..base
        };
        let a = image_centric_loss(hp.view(), hs.view(), &base).unwrap();
        let b = image_centric_loss(hp.view(), hs.view(), &mixed).unwrap();
        let g = loss_with_gradients(hp.view(), hs.view(), &mixed).unwrap();
        assert!((g.value - b).abs() < 1e-12);
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn shape_errors() {
        let cfg = LossConfig::default();
        assert!(matches!(
            image_centric_loss(Array2::zeros((2, 3)).view(), Array2::zeros((3, 3)).view(), &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
        let bad = LossConfig {
            temperature: 0.0,
            ..cfg
        };
        assert!(image_centric_loss(Array2::zeros((2, 3)).view(), Array2::zeros((2, 3)).view(), &bad).is_err());
    }

    fn finite_difference_check(mode: LossMode, spot_loss_weight: f64) {
        let hp = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4], [-0.5, 0.6, 0.1], [0.2, 0.2, 0.8]];
        let hs = array![[0.1, 0.4, -0.3], [-0.8, 0.5, 0.7], [0.6, -0.1, 0.2], [0.0, 0.9, -0.6]];
        let cfg = LossConfig {
            temperature: 0.7,
            mode,
            spot_loss_weight,
        };
        let out = loss_with_gradients(hp.view(), hs.view(), &cfg).unwrap();
        let h = 1e-6;
        for which in 0..2 {
            for idx in 0..hp.len() {
                let (r, c) = (idx / 3, idx % 3);
                let mut plus = [hp.clone(), hs.clone()];
                let mut minus = [hp.clone(), hs.clone()];
                plus[which][[r, c]] += h;
                minus[which][[r, c]] -= h;
                let fd = (loss_value(plus[0].view(), plus[1].view(), &cfg).unwrap()
                    - loss_value(minus[0].view(), minus[1].view(), &cfg).unwrap())
                    / (2.0 * h);
                let analytic = if which == 0 { out.grad_image[[r, c]] } else { out.grad_spot[[r, c]] };
                assert!((fd - analytic).abs() < 1e-7, "{mode:?} {which} {idx}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(LossMode::ImageCentric, 0.0);
        finite_difference_check(LossMode::ImageCentric, 0.5);
        finite_difference_check(LossMode::ClipSoft, 0.0);
        finite_difference_check(LossMode::ClipHard, 0.0);
    }

    fn matrix(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    }

    proptest! {
        #[test]
        fn matches_naive_loops((hp, hs, tau) in (1usize..=16, 1usize..=8).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), 0.5f64..2.0))) {
            let cfg = LossConfig { temperature: tau, ..LossConfig::default() };
            let v = image_centric_loss(hp.view(), hs.view(), &cfg).unwrap();
            prop_assert!((v - naive_image_centric(&rows(&hp), &rows(&hs), tau)).abs() < 1e-6);
        }

        #[test]
        fn targets_are_distributions((hp, hs) in (1usize..=12, 1usize..=6).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))) {
            for mode in [LossMode::ImageCentric, LossMode::ClipSoft] {
                let out = loss_with_gradients(hp.view(), hs.view(), &LossConfig::with_mode(mode)).unwrap();
                for row in out.targets.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&t| t > 0.0));
                }
            }
        }

        #[test]
        fn permutation_invariant((hp, hs, seed) in (2usize..=10, 1usize..=6).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), any::<u64>()))) {
            use rand::{seq::SliceRandom, SeedableRng};
            let n = hp.nrows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let hp2 = hp.select(Axis(0), &perm);
            let hs2 = hs.select(Axis(0), &perm);
            for mode in [LossMode::ImageCentric, LossMode::ClipSoft, LossMode::ClipHard] {
                let cfg = LossConfig::with_mode(mode);
                let a = loss_value(hp.view(), hs.view(), &cfg).unwrap();
                let b = loss_value(hp2.view(), hs2.view(), &cfg).unwrap();
                prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
            }
        }

        #[test]
        fn finite_across_temperatures(hp in (2usize..=8, 1usize..=6).prop_flat_map(|(n, d)| matrix(n, d)), tau in 0.05f64..10.0) {
            let cfg = LossConfig { temperature: tau, ..LossConfig::default() };
            let v = image_centric_loss(hp.view(), hp.view(), &cfg).unwrap();
            prop_assert!(v.is_finite());
        }
    }
}
