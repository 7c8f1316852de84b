//! Per-gene RMSE and SSIM, Hit@T, and their summaries.
//!
//! Matrices are spots x genes; per-gene metrics run down columns.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { c1: 0.01, c2: 0.03 }
    }
}

fn check_pair(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<()> {
    if truth.dim() != pred.dim() {
        return Err(Error::shape(
            "truth vs prediction",
            format!("{:?}", truth.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    if truth.iter().chain(pred.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("expression matrices".into()));
    }
    Ok(())
}

/// `sqrt(mean_j (pred_ij - truth_ij)^2)` for each gene `i`.
pub fn rmse_per_gene(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_pair(truth, pred)?;
    let m = truth.nrows() as f64;
    Ok(truth
        .axis_iter(Axis(1))
        .zip(pred.axis_iter(Axis(1)))
        .map(|(t, p)| {
            let ss: f64 = t.iter().zip(p.iter()).map(|(a, b)| (b - a).powi(2)).sum();
            (ss / m).sqrt()
        })
        .collect())
}

/// Divides each gene by its maximum over spots; genes with a non-positive
/// maximum become zero.
pub fn scale_by_max(matrix: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = matrix.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > 0.0 {
            col.mapv_inplace(|v| v / max);
        } else {
            col.fill(0.0);
        }
    }
    out
}

fn ssim_column(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, cfg: &SsimConfig) -> f64 {
    let m = x.len() as f64;
    let (mx, my) = (x.sum() / m, y.sum() / m);
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    let (vx, vy, cov) = (vx / m, vy / m, cov / m);
    let (c1, c2) = (cfg.c1 * cfg.c1, cfg.c2 * cfg.c2);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Structural similarity per gene on already scaled inputs, population
/// moments over spots.
pub fn ssim_per_gene(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>, cfg: &SsimConfig) -> Result<Vec<f64>> {
    check_pair(truth, pred)?;
    if truth.nrows() == 0 {
        return Err(Error::EmptyInput("no spots for SSIM".into()));
    }
    Ok(truth
        .axis_iter(Axis(1))
        .zip(pred.axis_iter(Axis(1)))
        .map(|(t, p)| ssim_column(p, t, cfg))
        .collect())
}

/// Scales truth and prediction independently, then [`ssim_per_gene`].
pub fn scaled_ssim_per_gene(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>, cfg: &SsimConfig) -> Result<Vec<f64>> {
    check_pair(truth, pred)?;
    ssim_per_gene(scale_by_max(truth).view(), scale_by_max(pred).view(), cfg)
}

/// Indices of the `t` largest entries, ties to the lower index.
pub fn top_t(row: ArrayView1<'_, f64>, t: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
    if t < idx.len() {
        idx.select_nth_unstable_by(t, cmp);
        idx.truncate(t);
    }
    idx.sort_by(cmp);
    idx
}

/// Fraction of spots whose predicted top-`t` genes meet the true top-`t`.
pub fn hit_at_t(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>, t: usize) -> Result<f64> {
    check_pair(truth, pred)?;
    let d = truth.ncols();
    if t == 0 || t > d {
        return Err(Error::TOutOfRange { t, d });
    }
    if truth.nrows() == 0 {
        return Err(Error::EmptyInput("no spots for Hit@T".into()));
    }
    let hits = truth
        .outer_iter()
        .zip(pred.outer_iter())
        .filter(|(tr, pr)| {
            let truth_top = top_t(*tr, t);
            top_t(*pr, t).iter().any(|g| truth_top.contains(g))
        })
        .count();
    Ok(hits as f64 / truth.nrows() as f64)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median of nothing".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean of nothing".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub const HIT_LEVELS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_per_gene: Vec<f64>,
    pub ssim_per_gene: Vec<f64>,
    pub rmse_median: f64,
    pub rmse_mean: f64,
    pub ssim_median: f64,
    pub ssim_mean: f64,
    pub hit_at: BTreeMap<usize, f64>,
    pub n_spots: usize,
}

pub fn summarize(rmse: Vec<f64>, ssim: Vec<f64>, hit_at: BTreeMap<usize, f64>, n_spots: usize) -> Result<MetricsReport> {
    Ok(MetricsReport {
        rmse_median: median(&rmse)?,
        rmse_mean: mean(&rmse)?,
        ssim_median: median(&ssim)?,
        ssim_mean: mean(&ssim)?,
        rmse_per_gene: rmse,
        ssim_per_gene: ssim,
        hit_at,
        n_spots,
    })
}

/// All metrics for one truth/prediction pair. Hit@T levels beyond the gene
/// count are omitted.
pub fn evaluate(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>, cfg: &SsimConfig) -> Result<MetricsReport> {
    let rmse = rmse_per_gene(truth, pred)?;
    let ssim = scaled_ssim_per_gene(truth, pred, cfg)?;
    let hit_at = HIT_LEVELS
        .iter()
        .filter(|&&t| t <= truth.ncols())
        .map(|&t| Ok((t, hit_at_t(truth, pred, t)?)))
        .collect::<Result<_>>()?;
    summarize(rmse, ssim, hit_at, truth.nrows())
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// `gene,rmse,ssim`, one row per gene.
    pub fn write_per_gene_csv(&self, path: &Path, genes: &[String]) -> Result<()> {
        if genes.len() != self.rmse_per_gene.len() {
            return Err(Error::shape("per-gene metric rows", self.rmse_per_gene.len(), genes.len()));
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        let err = |e: csv::Error| Error::parse(path, e.to_string());
        w.write_record(["gene", "rmse", "ssim"]).map_err(err)?;
        for ((g, r), s) in genes.iter().zip(&self.rmse_per_gene).zip(&self.ssim_per_gene) {
            w.write_record([g.clone(), r.to_string(), s.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
