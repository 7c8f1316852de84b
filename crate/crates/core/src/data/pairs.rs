use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use super::expression::{normalize_expression, standardize_per_gene, ExpressionTable};
use super::panel::GenePanel;
use super::slide::{extract_patch, Patch, SliceDataset};
use crate::error::{Error, Result};

/// One training unit: a patch and the panel-restricted expression of its spot.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpotPair {
    pub patch: Arc<Patch>,
    pub expression: Vec<f64>,
    pub slice_id: String,
    pub spot_id: String,
}

impl PatchSpotPair {
    /// `<slice_id>_<spot_id>`, also the patch file stem in a pairs archive.
    pub fn key(&self) -> String {
        format!("{}_{}", self.slice_id, self.spot_id)
    }
}

/// Pairs built from one slice plus the spots that had no in-bounds patch.
#[derive(Debug, Clone)]
pub struct PairBuild {
    pub pairs: Vec<PatchSpotPair>,
    pub skipped: Vec<String>,
}

/// Normalised expression of every spot in `slice`, optionally z-scored per
/// gene within the slice.
pub fn normalize_slice(slice: &SliceDataset, standardize: bool) -> Result<ExpressionTable> {
    let mut values = normalize_expression(slice.counts().view())?;
    if standardize {
        standardize_per_gene(&mut values);
    }
    ExpressionTable::new(slice.gene_names.clone(), values)
}

/// One pair per spot with an in-bounds patch, expression in panel order.
/// `expression` rows must follow `slice.spots`.
pub fn build_pairs(slice: &SliceDataset, expression: &ExpressionTable, panel: &GenePanel) -> Result<PairBuild> {
    if expression.values.nrows() != slice.spots.len() {
        return Err(Error::shape(
            format!("expression rows of slice {}", slice.slice_id),
            slice.spots.len(),
            expression.values.nrows(),
        ));
    }
    let columns = panel.column_indices(&expression.gene_names)?;
    let built: Vec<std::result::Result<PatchSpotPair, String>> = slice
        .spots
        .par_iter()
        .enumerate()
        .map(|(row, spot)| match extract_patch(&slice.image, spot.x, spot.y) {
            Ok(patch) => Ok(PatchSpotPair {
                patch: Arc::new(patch),
                expression: columns.iter().map(|&c| expression.values[[row, c]]).collect(),
                slice_id: slice.slice_id.clone(),
                spot_id: spot.spot_id.clone(),
            }),
            Err(_) => Err(spot.spot_id.clone()),
        })
        .collect();
    let mut out = PairBuild {
        pairs: Vec::new(),
        skipped: Vec::new(),
    };
    for item in built {
        match item {
            Ok(p) => out.pairs.push(p),
            Err(id) => out.skipped.push(id),
        }
    }
    Ok(out)
}

/// Expression rows of `pairs` stacked into an n x d matrix.
pub fn expression_matrix<'a>(pairs: impl IntoIterator<Item = &'a PatchSpotPair>) -> Array2<f64> {
    let mut d = 0;
    let mut n = 0;
    let mut flat = Vec::new();
    for p in pairs {
        d = p.expression.len();
        n += 1;
        flat.extend_from_slice(&p.expression);
    }
    Array2::from_shape_vec((n, d), flat).expect("pairs share one panel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::panel::PanelMode;
    use crate::data::slide::{SlideImage, SpotRecord};

    fn slice(points: &[(i64, i64)]) -> SliceDataset {
        let image = SlideImage::from_fn(300, 300, |y, x, c| ((y + x + c) % 7) as f32 / 7.0);
        let genes: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let spots = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| SpotRecord {
                slice_id: "s1".into(),
                spot_id: format!("p{i}"),
                x,
                y,
                counts: vec![1.0, 2.0, 3.0, 4.0 + i as f64],
            })
            .collect();
        SliceDataset::new("s1", image, genes, spots).unwrap()
    }

    fn panel(genes: &[&str]) -> GenePanel {
        GenePanel {
            mode: PanelMode::Heg,
            genes: genes.iter().map(|s| s.to_string()).collect(),
            scores: vec![0.0; genes.len()],
        }
    }

    #[test]
    fn skips_out_of_bounds() {
        let s = slice(&[(128, 128), (10, 10), (150, 160)]);
        let expr = normalize_slice(&s, false).unwrap();
        let built = build_pairs(&s, &expr, &panel(&["a", "b"])).unwrap();
        assert_eq!(built.pairs.len(), 2);
        assert_eq!(built.skipped, vec!["p1"]);
        assert_eq!(built.pairs[1].spot_id, "p2");
    }

    #[test]
    fn expression_follows_panel_order() {
        let s = slice(&[(128, 128)]);
        let expr = normalize_slice(&s, false).unwrap();
        let built = build_pairs(&s, &expr, &panel(&["d", "b"])).unwrap();
        let row = expr.values.row(0);
        assert_eq!(built.pairs[0].expression, vec![row[3], row[1]]);
    }

    #[test]
    fn empty_spot_list() {
        let s = slice(&[]);
        let expr = normalize_slice(&s, false).unwrap();
        let built = build_pairs(&s, &expr, &panel(&["a"])).unwrap();
        assert!(built.pairs.is_empty() && built.skipped.is_empty());
    }

    #[test]
    fn unknown_panel_gene() {
        let s = slice(&[(128, 128)]);
        let expr = normalize_slice(&s, false).unwrap();
        assert!(build_pairs(&s, &expr, &panel(&["zz"])).is_err());
    }
}
