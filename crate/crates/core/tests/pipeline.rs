use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use spotclip::data::load_pairs;
use spotclip::data::load_manifest;
use spotclip::metrics::MetricsReport;
use spotclip::nn::BackboneConfig;
use spotclip::pipeline::{self, prepare, RunConfig};
use spotclip::synthetic::{write_synthetic_manifest, SyntheticConfig};
use spotclip::training::Checkpoint;
use spotclip::Error;
use tempfile::TempDir;

fn toy(seed: Option<u64>) -> (TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let syn = SyntheticConfig {
        clusters: 2,
        genes: 12,
        spots_per_slice: 12,
        seed: 3,
        ..SyntheticConfig::default()
    };
    write_synthetic_manifest(&dir.path().join("data"), &syn, 3).unwrap();
    let mut cfg = RunConfig {
        manifest: Some(dir.path().join("data/manifest.json")),
        workdir: dir.path().join("work"),
        k: 4,
        seed,
        ..RunConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.embed_dim = 8;
    cfg.train.backbone = BackboneConfig::compact(4);
    (dir, cfg)
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn prepare_twice_gives_identical_files() {
    let (_dir, cfg) = toy(Some(1));
    let first = pipeline::cmd_prepare(&cfg).unwrap();
    let a = snapshot(&cfg.workdir);
    let second = pipeline::cmd_prepare(&cfg).unwrap();
    assert_eq!(first, second);
    assert_eq!(a, snapshot(&cfg.workdir));
    assert_eq!((first.training_size, first.testing_size, first.gene_size), (24, 12, 12));
    assert_eq!(first.dataset, "data_HVG");
    let csv = fs::read_to_string(cfg.workdir.join(pipeline::SUMMARY_CSV)).unwrap();
    assert_eq!(csv, "Dataset,Training size,Testing size,Gene size\ndata_HVG,24,12,12\n");
}

#[test]
fn archives_reload_as_prepared() {
    let (_dir, cfg) = toy(Some(1));
    pipeline::cmd_prepare(&cfg).unwrap();
    let slices = load_manifest(cfg.manifest.as_deref().unwrap()).unwrap();
    let prepared = prepare(&slices, "data", &cfg).unwrap();
    let (genes, reference) = load_pairs(&cfg.workdir.join(pipeline::REFERENCE_DIR), None).unwrap();
    let (_, query) = load_pairs(&cfg.workdir.join(pipeline::QUERY_DIR), Some(&genes)).unwrap();
    assert_eq!(genes, prepared.panel.genes);
    assert_eq!(reference, prepared.reference);
    assert_eq!(query, prepared.query);
}

#[test]
fn train_impute_evaluate_export() {
    let (_dir, mut cfg) = toy(None);
    pipeline::cmd_prepare(&cfg).unwrap();
    let ckpt = pipeline::cmd_train(&mut cfg).unwrap();
    // The drawn seed is stored in the config and in the checkpoint.
    assert_eq!(Some(ckpt.train.seed), cfg.seed);
    assert_eq!(Checkpoint::load(&cfg.workdir.join(pipeline::CHECKPOINT_FILE)).unwrap(), ckpt);
    let losses = fs::read_to_string(cfg.workdir.join(pipeline::LOSSES_FILE)).unwrap();
    assert_eq!(losses.lines().count(), 1 + cfg.train.epochs);

    let rows = pipeline::cmd_impute(&cfg).unwrap();
    assert_eq!(rows.values.dim(), (12, 12));
    let report = pipeline::cmd_evaluate(&cfg).unwrap();
    assert_eq!(MetricsReport::read_json(&cfg.workdir.join(pipeline::METRICS_FILE)).unwrap(), report);
    assert_eq!(report.n_spots, 12);
    assert_eq!(report.hit_at.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
    let per_gene = fs::read_to_string(cfg.workdir.join(pipeline::PER_GENE_FILE)).unwrap();
    assert_eq!(per_gene.lines().count(), 13);

    let path = pipeline::cmd_export_embeddings(&cfg).unwrap();
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 1 + 24 + 12);
}

#[test]
fn k_beyond_bank_is_rejected() {
    let (_dir, mut cfg) = toy(Some(2));
    pipeline::cmd_prepare(&cfg).unwrap();
    pipeline::cmd_train(&mut cfg).unwrap();
    cfg.k = 25;
    let err = pipeline::cmd_impute(&cfg).unwrap_err();
    assert!(matches!(err, Error::KOutOfRange { k: 25, n: 24 }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn truncated_predictions_are_rejected() {
    let (_dir, mut cfg) = toy(Some(2));
    pipeline::cmd_prepare(&cfg).unwrap();
    pipeline::cmd_train(&mut cfg).unwrap();
    let mut rows = pipeline::cmd_impute(&cfg).unwrap();
    rows.ids.pop();
    rows.values = rows.values.slice(ndarray::s![..-1, ..]).to_owned();
    pipeline::write_expression_rows(&cfg.workdir.join(pipeline::PREDICTIONS_FILE), &rows).unwrap();
    let err = pipeline::cmd_evaluate(&cfg).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
}

#[test]
fn query_can_join_the_bank() {
    let (_dir, mut cfg) = toy(Some(2));
    cfg.include_query_in_reference = true;
    pipeline::cmd_prepare(&cfg).unwrap();
    pipeline::cmd_train(&mut cfg).unwrap();
    cfg.k = 36;
    let rows = pipeline::cmd_impute(&cfg).unwrap();
    // With every spot as a neighbour, each prediction is the bank mean.
    for r in rows.values.rows() {
        for (a, b) in r.iter().zip(rows.values.row(0)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn missing_manifest_fails_cleanly() {
    let (dir, mut cfg) = toy(Some(1));
    cfg.manifest = Some(dir.path().join("nowhere.json"));
    let err = pipeline::cmd_prepare(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!cfg.workdir.exists());
}
