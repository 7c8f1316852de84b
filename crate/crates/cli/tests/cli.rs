use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn spotclip(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotclip"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--epochs",
    "2",
    "--batch-size",
    "8",
    "--k",
    "4",
    "--set",
    "embed_dim=8",
    "--set",
    "compact_features=4",
];

/// Synthetic data plus a prepared working directory `work`.
fn prepared() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&spotclip(
        &["synth", "--out", "data", "--slices", "3", "--spots", "12", "--genes", "12", "--clusters", "2", "--seed", "4"],
        p,
    ));
    ok(&spotclip(&["prepare", "--manifest", "data/manifest.json", "--workdir", "work"], p));
    dir
}

fn run(cmd: &str, extra: &[&str], cwd: &Path) -> Output {
    let mut args = vec![cmd, "--workdir", "work"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    spotclip(&args, cwd)
}

#[test]
fn full_toy_pipeline() {
    let dir = prepared();
    let p = dir.path();
    let train = ok(&run("train", &["--seed", "5"], p));
    assert!(train.starts_with("seed 5\n"), "{train}");
    ok(&run("impute", &[], p));
    let eval = ok(&run("evaluate", &[], p));
    assert!(eval.contains("hit@1="), "{eval}");
    ok(&run("export-embeddings", &[], p));
    for f in ["summary.csv", "checkpoint.json", "losses.csv", "predictions.csv", "metrics.json", "embeddings.csv"] {
        assert!(p.join("work").join(f).is_file(), "{f}");
    }
}

#[test]
fn omitted_seed_is_drawn_and_recorded() {
    let dir = prepared();
    let p = dir.path();
    let out = ok(&run("train", &[], p));
    let seed: u64 = out.lines().next().unwrap().strip_prefix("seed ").unwrap().parse().unwrap();
    let ckpt = fs::read_to_string(p.join("work/checkpoint.json")).unwrap();
    assert!(ckpt.contains(&format!("\"seed\":{seed}")), "seed {seed} not in checkpoint");
}

#[test]
fn flags_override_config_file() {
    let dir = prepared();
    let p = dir.path();
    fs::write(p.join("run.cfg"), "seed = 11\nepochs = 9  # overridden below\nloss = clip_hard\n").unwrap();
    let out = ok(&run("train", &["--config", "run.cfg"], p));
    assert!(out.starts_with("seed 11\n"));
    // TINY sets two epochs, which wins over the file.
    assert_eq!(fs::read_to_string(p.join("work/losses.csv")).unwrap().lines().count(), 3);
    let ckpt = fs::read_to_string(p.join("work/checkpoint.json")).unwrap();
    assert!(ckpt.contains("\"clip_hard\""));
}

#[test]
fn bad_config_line_exits_2() {
    let dir = prepared();
    let p = dir.path();
    fs::write(p.join("run.cfg"), "epochs = 2\nnonsense\n").unwrap();
    let out = run("train", &["--config", "run.cfg"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn k_beyond_bank_exits_2() {
    let dir = prepared();
    let p = dir.path();
    ok(&run("train", &["--seed", "1"], p));
    let out = spotclip(&["impute", "--workdir", "work", "--k", "999"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn mismatched_prediction_genes_exit_2() {
    let dir = prepared();
    let p = dir.path();
    ok(&run("train", &["--seed", "1"], p));
    ok(&run("impute", &[], p));
    let path = p.join("work/predictions.csv");
    let text = fs::read_to_string(&path).unwrap();
    // Drop the last gene column from every row.
    let cut: String = text
        .lines()
        .map(|l| format!("{}\n", &l[..l.rfind(',').unwrap()]))
        .collect();
    fs::write(&path, cut).unwrap();
    let out = run("evaluate", &[], p);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("manifest.json"), "{\"slices\": [{\"slice_id\": \"a\", \"image\": \"a.png\", \"spots\": \"a.csv\"}]}").unwrap();
    let out = spotclip(&["prepare", "--manifest", "manifest.json", "--workdir", "work"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a.png"));
}

#[test]
fn diverging_training_exits_3() {
    let dir = prepared();
    let p = dir.path();
    let out = run("train", &["--seed", "1", "--lr", "1e300"], p);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_reports_four_cells() {
    let dir = prepared();
    let p = dir.path();
    let out = ok(&run("ablate", &["--seed", "3"], p));
    for setting in ["full", "w/o loss", "w/o data", "w/o loss+data"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{setting} "))), "{setting} missing:\n{out}");
    }
    let csv = fs::read_to_string(p.join("work/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",ok")));
}
