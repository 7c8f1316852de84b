use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spotclip::pipeline::{self, RunConfig};
use spotclip::synthetic::{write_synthetic_manifest, SyntheticConfig};
use spotclip::Error;

#[derive(Parser)]
#[command(name = "spotclip", version, about = "Contrastive patch/expression alignment and retrieval imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select the gene panel and build reference and query pair archives.
    Prepare(RunArgs),
    /// Train the encoders and build the reference bank.
    Train(RunArgs),
    /// Impute query expression by top-K retrieval.
    Impute(RunArgs),
    /// Score predictions against the query slices.
    Evaluate(RunArgs),
    /// Write reference and query embeddings to CSV.
    ExportEmbeddings(RunArgs),
    /// Run the loss x augmentation ablation grid.
    Ablate(RunArgs),
    /// Write a clustered synthetic dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long, value_parser = ["hvg", "heg"])]
    panel: Option<String>,
    #[arg(long)]
    panel_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["image_centric", "clip_soft", "clip_hard"])]
    loss: Option<String>,
    #[arg(long)]
    no_augment: bool,
    /// Query slice id; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<String>,
    #[arg(long)]
    include_query_in_reference: bool,
    /// Any configuration key, e.g. `--set embed_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        put("manifest", self.manifest.as_ref().map(|p| p.display().to_string()));
        put("workdir", self.workdir.as_ref().map(|p| p.display().to_string()));
        put("panel", self.panel.clone());
        put("panel_size", self.panel_size.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("temperature", self.temperature.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("loss", self.loss.clone());
        put("augment", self.no_augment.then(|| "false".into()));
        put("holdout", (!self.holdout.is_empty()).then(|| self.holdout.join(",")));
        put("include_query_in_reference", self.include_query_in_reference.then(|| "true".into()));
        out
    }

    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(&k, &v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    slices: usize,
    #[arg(long, default_value_t = 100)]
    spots: usize,
    #[arg(long, default_value_t = 64)]
    genes: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn fmt_hits(hits: &std::collections::BTreeMap<usize, f64>) -> String {
    hits.iter().map(|(t, v)| format!("hit@{t}={v:.4}")).collect::<Vec<_>>().join(" ")
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Prepare(args) => {
            let s = pipeline::cmd_prepare(&args.resolve()?)?;
            println!("dataset        training  testing  genes");
            println!("{:<14} {:>8} {:>8} {:>6}", s.dataset, s.training_size, s.testing_size, s.gene_size);
            println!("skipped spots: {}", s.skipped.len());
        }
        Command::Train(args) => {
            let mut cfg = args.resolve()?;
            let ckpt = pipeline::cmd_train(&mut cfg)?;
            println!("seed {}", ckpt.train.seed);
            println!("epoch  train_loss  test_loss");
            for r in &ckpt.history {
                println!("{:>5}  {:>10.4}  {:>9.4}", r.epoch, r.train_loss, r.test_loss);
            }
            println!("best test loss {:.6} at epoch {}", ckpt.best_test_loss, ckpt.epoch_of_best);
        }
        Command::Impute(args) => {
            let cfg = args.resolve()?;
            let rows = pipeline::cmd_impute(&cfg)?;
            println!(
                "imputed {} spots x {} genes with K = {} into {}",
                rows.ids.len(),
                rows.genes.len(),
                cfg.k,
                cfg.workdir.join(pipeline::PREDICTIONS_FILE).display()
            );
        }
        Command::Evaluate(args) => {
            let r = pipeline::cmd_evaluate(&args.resolve()?)?;
            println!("spots {}", r.n_spots);
            println!("rmse median {:.4} mean {:.4}", r.rmse_median, r.rmse_mean);
            println!("ssim median {:.4} mean {:.4}", r.ssim_median, r.ssim_mean);
            println!("{}", fmt_hits(&r.hit_at));
        }
        Command::ExportEmbeddings(args) => {
            let path = pipeline::cmd_export_embeddings(&args.resolve()?)?;
            println!("wrote {}", path.display());
        }
        Command::Ablate(args) => {
            let mut cfg = args.resolve()?;
            let report = pipeline::cmd_ablate(&mut cfg)?;
            println!("seed {}  K {}", report.seed, report.k);
            for row in &report.rows {
                match (&row.metrics, &row.error) {
                    (Some(m), _) => println!(
                        "{:<14} rmse {:.4}/{:.4} ssim {:.4}/{:.4} {}",
                        row.setting,
                        m.rmse_median,
                        m.rmse_mean,
                        m.ssim_median,
                        m.ssim_mean,
                        fmt_hits(&m.hit_at)
                    ),
                    (None, e) => println!("{:<14} failed: {}", row.setting, e.as_deref().unwrap_or("")),
                }
            }
            if report.failures().next().is_some() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Synth(a) => {
            let cfg = SyntheticConfig {
                clusters: a.clusters,
                genes: a.genes,
                spots_per_slice: a.spots,
                seed: a.seed,
                ..SyntheticConfig::default()
            };
            write_synthetic_manifest(&a.out, &cfg, a.slices)?;
            println!("wrote {} slices to {}", a.slices, a.out.join("manifest.json").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
