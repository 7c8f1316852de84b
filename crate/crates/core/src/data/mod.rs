//! Slides, spot tables, expression normalisation, gene panels and
//! patch-spot pairs.

pub mod augment;
pub mod expression;
pub mod io;
pub mod pairs;
pub mod panel;
pub mod slide;

pub use augment::{augment_pair, AugmentedPatch, Dihedral};
pub use expression::{normalize_expression, normalize_expression_to, standardize_per_gene, ExpressionTable, TARGET_TOTAL};
pub use io::{load_manifest, load_pairs, save_pairs, Manifest, ManifestEntry};
pub use pairs::{build_pairs, expression_matrix, normalize_slice, PairBuild, PatchSpotPair};
pub use panel::{select_heg, select_hvg, select_panel, GenePanel, PanelMode, MAX_PANEL_SIZE};
pub use slide::{extract_patch, Patch, SliceDataset, SlideImage, SpotRecord, PATCH_SIZE};
