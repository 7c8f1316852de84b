//! Contrastive training with a pooled train/test split, paired augmentation
//! and best-test-loss checkpointing.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentedPatch, Dihedral, PatchSpotPair};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::nn::params::{export_tensors, fingerprint, import_tensors, TensorMap};
use crate::nn::{AdamW, BackboneConfig, DualEncoder, Mode, ModelConfig};
use crate::seed;

const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 1 << 20;
const STEP_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub split_fraction: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: bool,
    pub embed_dim: usize,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            split_fraction: 0.8,
            seed: 0,
            loss: LossConfig::default(),
            augment: true,
            embed_dim: 256,
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("split fraction {} outside (0, 1)", self.split_fraction)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive, weight decay non-negative".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        self.loss.validate()?;
        self.backbone.validate()
    }
}

/// Seeded shuffle of `0..n`, cut at `floor(n * fraction)`; both sides keep
/// at least one element.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, SPLIT_STREAM));
    let cut = ((n as f64 * fraction + 1e-9).floor() as usize).clamp(1, n - 1);
    let test = idx.split_off(cut);
    Ok((idx, test))
}

pub fn split_dataset<T: Clone>(pairs: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, test) = split_indices(pairs.len(), fraction, seed)?;
    Ok((
        train.iter().map(|&i| pairs[i].clone()).collect(),
        test.iter().map(|&i| pairs[i].clone()).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Eval-mode loss on the un-augmented training split after the epoch.
    pub train_loss: f64,
    pub test_loss: f64,
    /// Mean of the optimised (train-mode, augmented) batch losses.
    pub train_batch_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub best_test_loss: f64,
    pub epoch_of_best: usize,
    pub history: Vec<EpochRecord>,
    pub split: SplitRecord,
    pub fingerprint: String,
    pub params: TensorMap,
}

impl Checkpoint {
    /// Rebuilds the encoder; every tensor must be present with its shape.
    pub fn encoder(&self) -> Result<DualEncoder> {
        let mut model = DualEncoder::new(self.model.clone(), 0)?;
        import_tensors(&mut model, &self.params, "", true)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        let model = ckpt.encoder()?;
        if fingerprint(&model) != ckpt.fingerprint {
            return Err(Error::parse(path, "stored fingerprint does not match the parameters"));
        }
        Ok(ckpt)
    }
}

/// `epoch,train_loss,test_loss`.
pub fn write_losses_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["epoch", "train_loss", "test_loss"]).map_err(err)?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.test_loss.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Batch ranges for evaluation: consecutive full batches; a trailing partial
/// batch is dropped unless it is the only one.
fn eval_batches(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    if n <= batch_size {
        return if n == 0 { Vec::new() } else { vec![0..n] };
    }
    (0..n / batch_size).map(|b| b * batch_size..(b + 1) * batch_size).collect()
}

fn expressions(pairs: &[&PatchSpotPair]) -> Array2<f64> {
    crate::data::expression_matrix(pairs.iter().copied())
}

/// Mean configured loss over eval-mode batches of un-augmented pairs.
pub fn evaluate_loss(model: &DualEncoder, pairs: &[PatchSpotPair], loss: &LossConfig, batch_size: usize) -> Result<f64> {
    let batches = eval_batches(pairs.len(), batch_size.max(1));
    if batches.is_empty() {
        return Err(Error::EmptyInput("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for range in &batches {
        let batch: Vec<&PatchSpotPair> = pairs[range.clone()].iter().collect();
        let images: Vec<_> = batch.iter().map(|p| p.patch.as_ref()).collect();
        total += model.batch_loss(&images, expressions(&batch).view(), loss, Mode::Eval)?;
    }
    Ok(total / batches.len() as f64)
}

/// Evaluates a stored checkpoint.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, pairs: &[PatchSpotPair]) -> Result<f64> {
    evaluate_loss(&checkpoint.encoder()?, pairs, &checkpoint.train.loss, checkpoint.train.batch_size)
}

/// Per-pair usage counters recorded while training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    /// Times each pair's patch entered a gradient step.
    pub gradient_uses: HashMap<String, usize>,
    /// Augmented copies drawn per pair.
    pub augmentations: HashMap<String, usize>,
    /// Samples per epoch before batching.
    pub epoch_sizes: Vec<usize>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub stats: TrainStats,
    /// Parameters after the final epoch (the checkpoint holds the best).
    pub final_model: DualEncoder,
    pub train_pairs: Vec<PatchSpotPair>,
    pub test_pairs: Vec<PatchSpotPair>,
}

pub fn train(config: &TrainConfig, pairs: &[PatchSpotPair]) -> Result<Checkpoint> {
    Ok(train_detailed(config, pairs)?.checkpoint)
}

pub fn train_detailed(config: &TrainConfig, pairs: &[PatchSpotPair]) -> Result<TrainOutcome> {
    train_from(config, pairs, None)
}

/// Tensor-name prefix of image backbone parameters.
pub const BACKBONE_PREFIX: &str = "image.backbone.";

/// Like [`train_detailed`], with the image backbone optionally overwritten
/// by `backbone_weights` (names under [`BACKBONE_PREFIX`], all required)
/// before the first step.
pub fn train_from(config: &TrainConfig, pairs: &[PatchSpotPair], backbone_weights: Option<&TensorMap>) -> Result<TrainOutcome> {
    config.validate()?;
    let genes = pairs
        .first()
        .ok_or_else(|| Error::EmptyInput("no pairs to train on".into()))?
        .expression
        .len();
    if let Some(p) = pairs.iter().find(|p| p.expression.len() != genes) {
        return Err(Error::shape(format!("pair {} expression", p.key()), genes, p.expression.len()));
    }
    let (train_pairs, test_pairs) = split_dataset(pairs, config.split_fraction, config.seed)?;
    if config.batch_size > train_pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds the {} training pairs",
            config.batch_size,
            train_pairs.len()
        )));
    }

    let model_config = ModelConfig::new(genes, config.embed_dim, config.backbone.clone());
    let mut model = DualEncoder::new(model_config.clone(), seed::derive(config.seed, INIT_STREAM))?;
    if let Some(weights) = backbone_weights {
        import_tensors(&mut model, weights, BACKBONE_PREFIX, true)?;
    }
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut stats = TrainStats::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, TensorMap)> = None;

    for epoch in 1..=config.epochs {
        let mut rng = seed::rng(config.seed, EPOCH_STREAM + epoch as u64);
        let mut samples: Vec<(usize, Dihedral)> = Vec::with_capacity(2 * train_pairs.len());
        for (i, p) in train_pairs.iter().enumerate() {
            if config.augment {
                samples.push((i, Dihedral::sample(&mut rng)));
                samples.push((i, Dihedral::sample(&mut rng)));
                *stats.augmentations.entry(p.key()).or_default() += 2;
            } else {
                samples.push((i, Dihedral::IDENTITY));
            }
        }
        samples.shuffle(&mut rng);
        stats.epoch_sizes.push(samples.len());
        let mut batch_total = 0.0;
        let mut batch_count = 0usize;

        for (b, batch) in samples.chunks_exact(config.batch_size).enumerate() {
            let images: Vec<AugmentedPatch> = batch
                .iter()
                .map(|&(i, t)| AugmentedPatch {
                    patch: train_pairs[i].patch.clone(),
                    transform: t,
                })
                .collect();
            let members: Vec<&PatchSpotPair> = batch.iter().map(|&(i, _)| &train_pairs[i]).collect();
            let step_seed = seed::derive(config.seed, STEP_STREAM + stats.steps);
            let (value, grad) = model
                .loss_and_gradients(&images, expressions(&members).view(), &config.loss, Mode::Train { seed: step_seed })
                .map_err(|e| match e {
                    Error::NonFiniteInput(_) => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                })?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            optimizer.step(&mut model, &grad);
            batch_total += value;
            batch_count += 1;
            stats.steps += 1;
            for p in &members {
                *stats.gradient_uses.entry(p.key()).or_default() += 1;
            }
        }

        let train_loss = evaluate_loss(&model, &train_pairs, &config.loss, config.batch_size)?;
        let test_loss = evaluate_loss(&model, &test_pairs, &config.loss, config.batch_size)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            test_loss,
            train_batch_loss: batch_total / batch_count as f64,
        });
        if best.as_ref().is_none_or(|(l, _, _)| test_loss < *l) {
            best = Some((test_loss, epoch, export_tensors(&model)));
        }
    }

    let (best_test_loss, epoch_of_best, params) = best.expect("at least one epoch");
    let mut best_model = DualEncoder::new(model_config.clone(), 0)?;
    import_tensors(&mut best_model, &params, "", true)?;
    let checkpoint = Checkpoint {
        model: model_config,
        train: config.clone(),
        best_test_loss,
        epoch_of_best,
        history,
        split: SplitRecord {
            train: train_pairs.iter().map(PatchSpotPair::key).collect(),
            test: test_pairs.iter().map(PatchSpotPair::key).collect(),
        },
        fingerprint: fingerprint(&best_model),
        params,
    };
    Ok(TrainOutcome {
        checkpoint,
        stats,
        final_model: model,
        train_pairs,
        test_pairs,
    })
}
