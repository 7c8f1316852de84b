//! End-to-end commands over a working directory: prepare, train, impute,
//! evaluate, export embeddings and the loss/augmentation ablation grid.
//!
//! Layout under the working directory:
//!
//! ```text
//! panel.csv  summary.json  summary.csv
//! reference/  query/                 pairs archives
//! checkpoint.json  losses.csv  bank/
//! predictions.csv  metrics.json  per_gene_metrics.csv  embeddings.csv
//! ablation/<cell>/...  ablation.json  ablation.csv
//! ```

mod config;

pub use config::{RunConfig, KEYS};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::io::{load_pairs, save_pairs, write_panel};
use crate::data::{build_pairs, expression_matrix, load_manifest, normalize_slice, select_panel};
use crate::data::{GenePanel, PanelMode, PatchSpotPair, SliceDataset};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::metrics::{evaluate, MetricsReport, SsimConfig};
use crate::nn::params::TensorMap;
use crate::retrieval::{build_bank, embed_images, export_embeddings, impute_embedded, load_bank, save_bank, EmbeddingBank};
use crate::training::{train_from, write_losses_csv, Checkpoint, TrainConfig};

pub const PANEL_FILE: &str = "panel.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const REFERENCE_DIR: &str = "reference";
pub const QUERY_DIR: &str = "query";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const BANK_DIR: &str = "bank";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const PER_GENE_FILE: &str = "per_gene_metrics.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const ABLATION_DIR: &str = "ablation";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Dataset bookkeeping in the shape of a dataset-details table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub training_size: usize,
    pub testing_size: usize,
    pub gene_size: usize,
    pub panel: PanelMode,
    pub reference_slices: Vec<String>,
    pub query_slices: Vec<String>,
    /// `slice_spot` keys whose patch left the slide.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub panel: GenePanel,
    pub reference: Vec<PatchSpotPair>,
    pub query: Vec<PatchSpotPair>,
    pub summary: DatasetSummary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn replace_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    create_dir(dir)
}

/// Splits slices into reference and query, selects the panel from the
/// reference slices only and builds pairs for both sides.
pub fn prepare(slices: &[SliceDataset], dataset: &str, cfg: &RunConfig) -> Result<Prepared> {
    if slices.is_empty() {
        return Err(Error::EmptyInput("manifest lists no slices".into()));
    }
    let holdout: Vec<String> = if cfg.holdout.is_empty() {
        vec![slices[slices.len() - 1].slice_id.clone()]
    } else {
        cfg.holdout.clone()
    };
    for id in &holdout {
        if !slices.iter().any(|s| &s.slice_id == id) {
            return Err(Error::InvalidConfig(format!("holdout slice {id:?} is not in the manifest")));
        }
    }
    let is_query = |s: &SliceDataset| holdout.contains(&s.slice_id);
    if slices.iter().all(is_query) {
        return Err(Error::InvalidConfig("every slice is held out; no reference slices remain".into()));
    }

    let tables = slices
        .iter()
        .map(|s| normalize_slice(s, cfg.standardize))
        .collect::<Result<Vec<_>>>()?;
    let reference_tables: Vec<_> = slices
        .iter()
        .zip(&tables)
        .filter(|(s, _)| !is_query(s))
        .map(|(_, t)| t.clone())
        .collect();
    let panel = select_panel(cfg.panel, &reference_tables, cfg.panel_size)?;

    let (mut reference, mut query, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
    let (mut reference_slices, mut query_slices) = (Vec::new(), Vec::new());
    for (slice, table) in slices.iter().zip(&tables) {
        let built = build_pairs(slice, table, &panel)?;
        skipped.extend(built.skipped.iter().map(|spot| format!("{}_{spot}", slice.slice_id)));
        if is_query(slice) {
            query.extend(built.pairs);
            query_slices.push(slice.slice_id.clone());
        } else {
            reference.extend(built.pairs);
            reference_slices.push(slice.slice_id.clone());
        }
    }
    let summary = DatasetSummary {
        dataset: format!("{dataset}_{}", panel.mode.as_str().to_ascii_uppercase()),
        training_size: reference.len(),
        testing_size: query.len(),
        gene_size: panel.len(),
        panel: panel.mode,
        reference_slices,
        query_slices,
        skipped,
    };
    Ok(Prepared {
        panel,
        reference,
        query,
        summary,
    })
}

fn write_summary_csv(path: &Path, s: &DatasetSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["Dataset", "Training size", "Testing size", "Gene size"]).map_err(err)?;
    w.write_record([
        s.dataset.clone(),
        s.training_size.to_string(),
        s.testing_size.to_string(),
        s.gene_size.to_string(),
    ])
    .map_err(err)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<DatasetSummary> {
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("prepare needs a manifest".into()))?;
    let slices = load_manifest(manifest)?;
    let dataset = manifest
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().and_then(Path::file_name).map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into());
    let prepared = prepare(&slices, &dataset, cfg)?;
    let work = &cfg.workdir;
    create_dir(work)?;
    write_panel(&work.join(PANEL_FILE), &prepared.panel)?;
    for (dir, pairs) in [(REFERENCE_DIR, &prepared.reference), (QUERY_DIR, &prepared.query)] {
        let dir = work.join(dir);
        replace_dir(&dir)?;
        save_pairs(&dir, &prepared.panel.genes, pairs)?;
    }
    write_json(&work.join(SUMMARY_JSON), &prepared.summary)?;
    write_summary_csv(&work.join(SUMMARY_CSV), &prepared.summary)?;
    Ok(prepared.summary)
}

/// Best-test-loss checkpoint and the retrieval bank built from it.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub checkpoint: Checkpoint,
    pub bank: EmbeddingBank,
}

/// Trains on `reference` and embeds `reference` plus `extra_bank` (the
/// query pairs when they are admitted to the reference set).
pub fn fit(
    config: &TrainConfig,
    reference: &[PatchSpotPair],
    extra_bank: &[PatchSpotPair],
    backbone_weights: Option<&TensorMap>,
) -> Result<Fitted> {
    let outcome = train_from(config, reference, backbone_weights)?;
    let model = outcome.checkpoint.encoder()?;
    let members: Vec<PatchSpotPair> = reference.iter().chain(extra_bank).cloned().collect();
    let bank = build_bank(&model, &members)?;
    Ok(Fitted {
        checkpoint: outcome.checkpoint,
        bank,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// One row per query, in query order.
    pub values: Array2<f64>,
    /// Bank indices of each query's neighbours, best first.
    pub neighbours: Vec<Vec<usize>>,
}

pub fn predict(checkpoint: &Checkpoint, bank: &EmbeddingBank, query: &[PatchSpotPair], k: usize) -> Result<Prediction> {
    if k == 0 || k > bank.len() {
        return Err(Error::KOutOfRange { k, n: bank.len() });
    }
    let model = checkpoint.encoder()?;
    bank.check_encoder(&model)?;
    if query.is_empty() {
        return Ok(Prediction {
            values: Array2::zeros((0, bank.expressions.ncols())),
            neighbours: Vec::new(),
        });
    }
    let images: Vec<_> = query.iter().map(|p| p.patch.as_ref()).collect();
    let embeddings = embed_images(&model, &images)?;
    let (values, neighbours) = impute_embedded(embeddings.view(), bank, k)?;
    Ok(Prediction { values, neighbours })
}

/// Metrics of `predicted` against the query pairs' own expression.
pub fn score(query: &[PatchSpotPair], predicted: &Array2<f64>) -> Result<MetricsReport> {
    let truth = expression_matrix(query);
    evaluate(truth.view(), predicted.view(), &SsimConfig::default())
}

fn load_weights(cfg: &RunConfig) -> Result<Option<TensorMap>> {
    cfg.backbone_weights.as_deref().map(read_json).transpose()
}

fn load_reference(work: &Path) -> Result<(Vec<String>, Vec<PatchSpotPair>)> {
    load_pairs(&work.join(REFERENCE_DIR), None)
}

fn load_query(work: &Path, genes: &[String]) -> Result<Vec<PatchSpotPair>> {
    load_pairs(&work.join(QUERY_DIR), Some(genes)).map(|(_, p)| p)
}

/// Trains from the prepared reference archive; writes the checkpoint,
/// `losses.csv` and the bank. The checkpoint records the seed used.
pub fn cmd_train(cfg: &mut RunConfig) -> Result<Checkpoint> {
    let config = cfg.train_config();
    let work = cfg.workdir.clone();
    let (genes, reference) = load_reference(&work)?;
    let extra = if cfg.include_query_in_reference {
        load_query(&work, &genes)?
    } else {
        Vec::new()
    };
    let weights = load_weights(cfg)?;
    let fitted = fit(&config, &reference, &extra, weights.as_ref())?;
    fitted.checkpoint.save(&work.join(CHECKPOINT_FILE))?;
    write_losses_csv(&work.join(LOSSES_FILE), &fitted.checkpoint.history)?;
    let bank_dir = work.join(BANK_DIR);
    replace_dir(&bank_dir)?;
    save_bank(&bank_dir, &fitted.bank, &genes)?;
    Ok(fitted.checkpoint)
}

/// Expression rows keyed by `(slice_id, spot_id)`, as stored in
/// `pairs.csv` and `predictions.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionRows {
    pub genes: Vec<String>,
    pub ids: Vec<(String, String)>,
    pub values: Array2<f64>,
}

pub fn write_expression_rows(path: &Path, rows: &ExpressionRows) -> Result<()> {
    if rows.values.dim() != (rows.ids.len(), rows.genes.len()) {
        return Err(Error::shape(
            "expression rows",
            format!("({}, {})", rows.ids.len(), rows.genes.len()),
            format!("{:?}", rows.values.dim()),
        ));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    let mut header = vec!["spot_id".to_string(), "slice_id".into()];
    header.extend(rows.genes.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for ((slice, spot), row) in rows.ids.iter().zip(rows.values.outer_iter()) {
        let mut rec = vec![spot.clone(), slice.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_expression_rows(path: &Path) -> Result<ExpressionRows> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.len() < 2 || header[0] != "spot_id" || header[1] != "slice_id" {
        return Err(Error::parse(path, "header must start with spot_id,slice_id"));
    }
    let genes = header[2..].to_vec();
    let (mut ids, mut flat) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        ids.push((rec[1].to_string(), rec[0].to_string()));
        for (j, v) in rec.iter().enumerate().skip(2) {
            flat.push(v.trim().parse::<f64>().map_err(|_| {
                Error::parse(path, format!("line {line}, column {}: cannot parse {v:?}", header[j]))
            })?);
        }
    }
    let values = Array2::from_shape_vec((ids.len(), genes.len()), flat).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(ExpressionRows { genes, ids, values })
}

/// Imputes every query pair from the saved bank into `predictions.csv`.
pub fn cmd_impute(cfg: &RunConfig) -> Result<ExpressionRows> {
    let work = &cfg.workdir;
    let checkpoint = Checkpoint::load(&work.join(CHECKPOINT_FILE))?;
    let (bank, genes) = load_bank(&work.join(BANK_DIR))?;
    if cfg.k == 0 || cfg.k > bank.len() {
        return Err(Error::KOutOfRange { k: cfg.k, n: bank.len() });
    }
    let query = load_query(work, &genes)?;
    let prediction = predict(&checkpoint, &bank, &query, cfg.k)?;
    let rows = ExpressionRows {
        genes,
        ids: query.iter().map(|p| (p.slice_id.clone(), p.spot_id.clone())).collect(),
        values: prediction.values,
    };
    write_expression_rows(&work.join(PREDICTIONS_FILE), &rows)?;
    Ok(rows)
}

/// Reorders `pred` to the row order of `truth`; genes and spots must agree.
pub fn align(truth: &ExpressionRows, pred: &ExpressionRows) -> Result<Array2<f64>> {
    if truth.genes.len() != pred.genes.len() {
        return Err(Error::shape("prediction genes", truth.genes.len(), pred.genes.len()));
    }
    if let Some((t, p)) = truth.genes.iter().zip(&pred.genes).find(|(t, p)| t != p) {
        return Err(Error::InvalidConfig(format!("prediction gene {p:?} where truth has {t:?}")));
    }
    if truth.ids.len() != pred.ids.len() {
        return Err(Error::shape("prediction rows", truth.ids.len(), pred.ids.len()));
    }
    let index: HashMap<&(String, String), usize> = pred.ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
    let mut out = Array2::zeros(truth.values.dim());
    for (row, id) in out.outer_iter_mut().zip(&truth.ids) {
        let i = *index
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("no prediction for spot {}_{}", id.0, id.1)))?;
        let mut row = row;
        row.assign(&pred.values.row(i));
    }
    Ok(out)
}

fn write_report(dir: &Path, report: &MetricsReport, genes: &[String]) -> Result<()> {
    report.write_json(&dir.join(METRICS_FILE))?;
    report.write_per_gene_csv(&dir.join(PER_GENE_FILE), genes)
}

/// Scores `predictions.csv` against the query slices' true expression.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    let work = &cfg.workdir;
    let truth = read_expression_rows(&work.join(QUERY_DIR).join(crate::data::io::PAIRS_FILE))?;
    let pred = read_expression_rows(&work.join(PREDICTIONS_FILE))?;
    let aligned = align(&truth, &pred)?;
    let report = evaluate(truth.values.view(), aligned.view(), &SsimConfig::default())?;
    write_report(work, &report, &truth.genes)?;
    Ok(report)
}

/// Writes reference and query embeddings to `embeddings.csv`.
pub fn cmd_export_embeddings(cfg: &RunConfig) -> Result<PathBuf> {
    let work = &cfg.workdir;
    let checkpoint = Checkpoint::load(&work.join(CHECKPOINT_FILE))?;
    let (bank, genes) = load_bank(&work.join(BANK_DIR))?;
    let model = checkpoint.encoder()?;
    bank.check_encoder(&model)?;
    let query = load_query(work, &genes)?;
    let images: Vec<_> = query.iter().map(|p| p.patch.as_ref()).collect();
    let embeddings = embed_images(&model, &images)?;
    let ids: Vec<String> = query.iter().map(PatchSpotPair::key).collect();
    let path = work.join(EMBEDDINGS_FILE);
    export_embeddings(&path, &bank, &ids, embeddings.view())?;
    Ok(path)
}

/// One ablation cell: a loss mode and an augmentation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub setting: &'static str,
    pub dir: &'static str,
    pub loss: LossMode,
    pub augment: bool,
}

pub const ABLATION_CELLS: [AblationCell; 4] = [
    AblationCell {
        setting: "full",
        dir: "full",
        loss: LossMode::ImageCentric,
        augment: true,
    },
    AblationCell {
        setting: "w/o loss",
        dir: "wo_loss",
        loss: LossMode::ClipSoft,
        augment: true,
    },
    AblationCell {
        setting: "w/o data",
        dir: "wo_data",
        loss: LossMode::ImageCentric,
        augment: false,
    },
    AblationCell {
        setting: "w/o loss+data",
        dir: "wo_loss_data",
        loss: LossMode::ClipSoft,
        augment: false,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub config: TrainConfig,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub k: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn failures(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }
}

fn run_cell(
    config: &TrainConfig,
    cfg: &RunConfig,
    genes: &[String],
    reference: &[PatchSpotPair],
    query: &[PatchSpotPair],
    weights: Option<&TensorMap>,
    dir: &Path,
) -> Result<MetricsReport> {
    let extra: &[PatchSpotPair] = if cfg.include_query_in_reference { query } else { &[] };
    let fitted = fit(config, reference, extra, weights)?;
    let prediction = predict(&fitted.checkpoint, &fitted.bank, query, cfg.k)?;
    let report = score(query, &prediction.values)?;
    replace_dir(dir)?;
    fitted.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write_losses_csv(&dir.join(LOSSES_FILE), &fitted.checkpoint.history)?;
    let rows = ExpressionRows {
        genes: genes.to_vec(),
        ids: query.iter().map(|p| (p.slice_id.clone(), p.spot_id.clone())).collect(),
        values: prediction.values,
    };
    write_expression_rows(&dir.join(PREDICTIONS_FILE), &rows)?;
    write_report(dir, &report, genes)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_ablation_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record([
        "setting",
        "loss",
        "augment",
        "rmse_median",
        "rmse_mean",
        "ssim_median",
        "ssim_mean",
        "hit@1",
        "hit@2",
        "hit@3",
        "status",
    ])
    .map_err(err)?;
    for row in &report.rows {
        let m = row.metrics.as_ref();
        let hit = |t: usize| fmt_opt(m.and_then(|m| m.hit_at.get(&t).copied()));
        w.write_record([
            row.setting.clone(),
            row.config.loss.mode.as_str().to_string(),
            row.config.augment.to_string(),
            fmt_opt(m.map(|m| m.rmse_median)),
            fmt_opt(m.map(|m| m.rmse_mean)),
            fmt_opt(m.map(|m| m.ssim_median)),
            fmt_opt(m.map(|m| m.ssim_mean)),
            hit(1),
            hit(2),
            hit(3),
            row.error.clone().unwrap_or_else(|| "ok".into()),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the four loss × augmentation cells with one shared seed. A failing
/// cell is recorded in its row and the remaining cells still run.
pub fn cmd_ablate(cfg: &mut RunConfig) -> Result<AblationReport> {
    let base = cfg.train_config();
    let work = cfg.workdir.clone();
    let (genes, reference) = load_reference(&work)?;
    let query = load_query(&work, &genes)?;
    let weights = load_weights(cfg)?;
    let root = work.join(ABLATION_DIR);
    create_dir(&root)?;
    let rows = ABLATION_CELLS
        .iter()
        .map(|cell| {
            let mut config = base.clone();
            config.loss.mode = cell.loss;
            config.augment = cell.augment;
            let result = run_cell(&config, cfg, &genes, &reference, &query, weights.as_ref(), &root.join(cell.dir));
            let (metrics, error) = match result {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AblationRow {
                setting: cell.setting.into(),
                config,
                metrics,
                error,
            }
        })
        .collect();
    let report = AblationReport {
        seed: base.seed,
        k: cfg.k,
        rows,
    };
    write_json(&work.join(ABLATION_JSON), &report)?;
    write_ablation_csv(&work.join(ABLATION_CSV), &report)?;
    Ok(report)
}
