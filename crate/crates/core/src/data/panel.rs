//! Gene panel selection: highly expressed (HEG) or highly variable (HVG).
//!
//! Ranking is always by score descending, then by gene index ascending,
//! where the index is the gene's position in the first slice.

use std::collections::{BTreeSet, HashMap};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::expression::ExpressionTable;
use crate::error::{Error, Result};

pub const MAX_PANEL_SIZE: usize = 3500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanelMode {
    Hvg,
    Heg,
}

impl PanelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PanelMode::Hvg => "hvg",
            PanelMode::Heg => "heg",
        }
    }
}

impl std::str::FromStr for PanelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hvg" => Ok(PanelMode::Hvg),
            "heg" => Ok(PanelMode::Heg),
            other => Err(Error::InvalidConfig(format!("unknown panel mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePanel {
    pub mode: PanelMode,
    pub genes: Vec<String>,
    /// Mean expression (HEG) or summed per-slice variance (HVG).
    pub scores: Vec<f64>,
}

impl GenePanel {
    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    /// Column of each panel gene within `gene_names`.
    pub fn column_indices(&self, gene_names: &[String]) -> Result<Vec<usize>> {
        let lookup: HashMap<&str, usize> = gene_names.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        self.genes
            .iter()
            .map(|g| {
                lookup
                    .get(g.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidConfig(format!("panel gene {g} missing from slice")))
            })
            .collect()
    }
}

/// Genes present in every slice, in first-slice order, with their column in
/// each slice.
fn shared_universe(slices: &[ExpressionTable]) -> Result<(Vec<String>, Vec<Vec<usize>>)> {
    let first = slices.first().ok_or_else(|| Error::EmptyInput("no slices for panel selection".into()))?;
    if slices.iter().all(|s| s.values.nrows() == 0) {
        return Err(Error::EmptyInput("no spots for panel selection".into()));
    }
    let lookups: Vec<HashMap<&str, usize>> = slices
        .iter()
        .map(|s| s.gene_names.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect())
        .collect();
    let mut genes = Vec::new();
    let mut columns = vec![Vec::new(); slices.len()];
    for g in &first.gene_names {
        let cols: Option<Vec<usize>> = lookups.iter().map(|l| l.get(g.as_str()).copied()).collect();
        if let Some(cols) = cols {
            genes.push(g.clone());
            for (c, col) in columns.iter_mut().zip(cols) {
                c.push(col);
            }
        }
    }
    if genes.is_empty() {
        return Err(Error::EmptyInput("slices share no genes".into()));
    }
    Ok((genes, columns))
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size > MAX_PANEL_SIZE {
        return Err(Error::InvalidConfig(format!("panel size {size} outside 1..={MAX_PANEL_SIZE}")));
    }
    Ok(())
}

/// Indices of `scores` ordered by (score desc, index asc).
fn rank(candidates: impl IntoIterator<Item = usize>, scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.into_iter().collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Top genes by mean normalised expression over all spots of all slices.
pub fn select_heg(slices: &[ExpressionTable], size: usize) -> Result<GenePanel> {
    check_size(size)?;
    let (genes, columns) = shared_universe(slices)?;
    let mut sums = vec![0.0; genes.len()];
    let mut spots = 0usize;
    for (slice, cols) in slices.iter().zip(&columns) {
        spots += slice.values.nrows();
        let col_sums = slice.values.sum_axis(Axis(0));
        for (s, &c) in sums.iter_mut().zip(cols) {
            *s += col_sums[c];
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / spots as f64).collect();
    let order = rank(0..genes.len(), &means);
    Ok(GenePanel {
        mode: PanelMode::Heg,
        genes: order.iter().take(size).map(|&i| genes[i].clone()).collect(),
        scores: order.iter().take(size).map(|&i| means[i]).collect(),
    })
}

/// Union of each slice's top-`size` genes by population variance, re-ranked
/// by variance summed over slices.
pub fn select_hvg(slices: &[ExpressionTable], size: usize) -> Result<GenePanel> {
    check_size(size)?;
    let (genes, columns) = shared_universe(slices)?;
    let mut summed = vec![0.0; genes.len()];
    let mut union = BTreeSet::new();
    for (slice, cols) in slices.iter().zip(&columns) {
        let m = slice.values.nrows();
        if m == 0 {
            continue;
        }
        let variances: Vec<f64> = cols
            .iter()
            .map(|&c| {
                let col = slice.values.column(c);
                let mean = col.sum() / m as f64;
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64
            })
            .collect();
        for (s, v) in summed.iter_mut().zip(&variances) {
            *s += v;
        }
        union.extend(rank(0..genes.len(), &variances).into_iter().take(size));
    }
    let order = rank(union, &summed);
    Ok(GenePanel {
        mode: PanelMode::Hvg,
        genes: order.iter().take(size).map(|&i| genes[i].clone()).collect(),
        scores: order.iter().take(size).map(|&i| summed[i]).collect(),
    })
}

pub fn select_panel(mode: PanelMode, slices: &[ExpressionTable], size: usize) -> Result<GenePanel> {
    match mode {
        PanelMode::Heg => select_heg(slices, size),
        PanelMode::Hvg => select_hvg(slices, size),
    }
}
