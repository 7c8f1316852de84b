use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Per-spot library size after normalisation.
pub const TARGET_TOTAL: f64 = 10_000.0;

/// Expression values for one slice: spots x genes, columns named.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTable {
    pub gene_names: Vec<String>,
    pub values: Array2<f64>,
}

impl ExpressionTable {
    pub fn new(gene_names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != gene_names.len() {
            return Err(Error::shape("expression table columns", gene_names.len(), values.ncols()));
        }
        Ok(Self { gene_names, values })
    }
}

/// Scales each spot to [`TARGET_TOTAL`] then applies `ln(1 + v)`.
pub fn normalize_expression(counts: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    normalize_expression_to(counts, TARGET_TOTAL)
}

/// As [`normalize_expression`] with an explicit per-spot total. All-zero
/// spots stay zero.
pub fn normalize_expression_to(counts: ArrayView2<'_, f64>, target: f64) -> Result<Array2<f64>> {
    for ((spot, gene), &v) in counts.indexed_iter() {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::NegativeCount { spot, gene, value: v });
        }
    }
    let mut out = counts.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let total = row.sum();
        if total > 0.0 {
            let scale = target / total;
            row.mapv_inplace(|v| (v * scale).ln_1p());
        }
    }
    Ok(out)
}

/// Optional per-slice batch hook: z-scores each gene within the slice
/// (population variance; constant genes become zero).
pub fn standardize_per_gene(values: &mut Array2<f64>) {
    let m = values.nrows() as f64;
    if m == 0.0 {
        return;
    }
    for mut col in values.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / m;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let sd = var.sqrt();
        col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
    }
}
