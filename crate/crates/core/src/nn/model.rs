//! Image and spot encoders and the joint training step.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::head::{Mode, ProjectionHead, DROPOUT_RATE};
use super::layers::{FeatureMap, Linear};
use super::params::{accumulate, join, zeros_like, Module, ParamView, ParamViewMut};
use crate::error::{Error, Result};
use crate::loss::{loss_with_gradients, LossConfig};

/// Anything that can be rendered as an HWC image for the backbone.
pub trait ImageSource: Sync {
    fn to_feature_map(&self) -> FeatureMap;
}

impl ImageSource for FeatureMap {
    fn to_feature_map(&self) -> FeatureMap {
        self.clone()
    }
}

impl<T: ImageSource> ImageSource for &T {
    fn to_feature_map(&self) -> FeatureMap {
        (*self).to_feature_map()
    }
}

/// Fixed pixel standardisation applied before the backbone: `[0, 1]` maps
/// to `[-2, 2]`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

fn backbone_input<P: ImageSource>(img: &P) -> FeatureMap {
    let mut x = img.to_feature_map();
    for v in &mut x.data {
        *v = (*v - INPUT_MEAN) / INPUT_STD;
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Expression dimension `d` (panel size).
    pub genes: usize,
    /// Shared embedding dimension `d_o`.
    pub embed_dim: usize,
    pub backbone: BackboneConfig,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(genes: usize, embed_dim: usize, backbone: BackboneConfig) -> Self {
        Self {
            genes,
            embed_dim,
            backbone,
            dropout: DROPOUT_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.genes == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("genes and embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.backbone.validate()
    }
}

/// Rows of a batch of embeddings plus the mode that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub rows: Array2<f64>,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub backbone: Backbone,
    pub head: ProjectionHead,
}

#[derive(Debug, Clone)]
pub struct SpotEncoder {
    pub linear: Linear,
    pub head: ProjectionHead,
}

/// Both encoders of the shared embedding space.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub image: ImageEncoder,
    pub spot: SpotEncoder,
}

fn sub_mode(mode: Mode, stream: u64) -> Mode {
    match mode {
        Mode::Eval => Mode::Eval,
        Mode::Train { seed } => Mode::Train {
            seed: crate::seed::derive(seed, stream),
        },
    }
}

/// Samples per gradient accumulator. Fixed so the summation order, and
/// hence the result bits, do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

impl DualEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone, &mut rng);
        let image_head = ProjectionHead::new(backbone.feature_dim(), config.embed_dim, config.dropout, &mut rng);
        let linear = Linear::new(config.genes, config.embed_dim, &mut rng);
        let spot_head = ProjectionHead::new(config.embed_dim, config.embed_dim, config.dropout, &mut rng);
        Ok(Self {
            config,
            image: ImageEncoder {
                backbone,
                head: image_head,
            },
            spot: SpotEncoder {
                linear,
                head: spot_head,
            },
        })
    }

    /// Pooled backbone features, one row per image.
    pub fn image_backbone<P: ImageSource>(&self, images: &[P]) -> Result<Array2<f64>> {
        let dim = self.image.backbone.feature_dim();
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map(|img| {
                let x = backbone_input(img);
                if x.channels != 3 {
                    return Err(Error::shape("image channels", 3, x.channels));
                }
                Ok(self.image.backbone.forward(&x))
            })
            .collect::<Result<_>>()?;
        stack_rows(rows, dim)
    }

    pub fn encode_images<P: ImageSource>(&self, images: &[P], mode: Mode) -> Result<EmbeddingBatch> {
        let z = self.image_backbone(images)?;
        let rows = self.image.head.forward(z.view(), sub_mode(mode, 1))?;
        Ok(EmbeddingBatch { rows, mode })
    }

    pub fn encode_spots(&self, expressions: ArrayView2<'_, f64>, mode: Mode) -> Result<EmbeddingBatch> {
        if expressions.ncols() != self.config.genes {
            return Err(Error::shape("spot expression width", self.config.genes, expressions.ncols()));
        }
        let hidden = self.spot.linear.forward(expressions);
        let rows = self.spot.head.forward(hidden.view(), sub_mode(mode, 2))?;
        Ok(EmbeddingBatch { rows, mode })
    }

    /// Configured loss on one batch without gradients.
    pub fn batch_loss<P: ImageSource>(
        &self,
        images: &[P],
        expressions: ArrayView2<'_, f64>,
        loss: &LossConfig,
        mode: Mode,
    ) -> Result<f64> {
        let z = self.image_backbone(images)?;
        self.loss_from_features(z.view(), expressions, loss, mode)
    }

    /// Configured loss from pooled backbone features, as returned by
    /// [`DualEncoder::image_backbone`].
    pub fn loss_from_features(
        &self,
        features: ArrayView2<'_, f64>,
        expressions: ArrayView2<'_, f64>,
        loss: &LossConfig,
        mode: Mode,
    ) -> Result<f64> {
        let hp = self.image.head.forward(features, sub_mode(mode, 1))?;
        let hs = self.encode_spots(expressions, mode)?;
        crate::loss::loss_value(hp.view(), hs.rows.view(), loss)
    }

    /// Loss and full parameter gradient for one batch.
    pub fn loss_and_gradients<P: ImageSource>(
        &self,
        images: &[P],
        expressions: ArrayView2<'_, f64>,
        loss: &LossConfig,
        mode: Mode,
    ) -> Result<(f64, DualEncoder)> {
        if images.len() != expressions.nrows() {
            return Err(Error::shape("batch size", images.len(), expressions.nrows()));
        }
        if expressions.ncols() != self.config.genes {
            return Err(Error::shape("spot expression width", self.config.genes, expressions.ncols()));
        }
        let backbone = &self.image.backbone;
        let forward: Vec<(Vec<f64>, _)> = images
            .par_iter()
            .map(|img| backbone.forward_cached(&backbone_input(img)))
            .collect();
        let (feature_rows, caches): (Vec<Vec<f64>>, Vec<_>) = forward.into_iter().unzip();
        let z = stack_rows(feature_rows, backbone.feature_dim())?;

        let (hp, image_cache) = self.image.head.forward_cached(z.view(), sub_mode(mode, 1))?;
        let hidden = self.spot.linear.forward(expressions);
        let (hs, spot_cache) = self.spot.head.forward_cached(hidden.view(), sub_mode(mode, 2))?;
        let out = loss_with_gradients(hp.view(), hs.view(), loss)?;

        let mut grad = zeros_like(self);
        let dz = self.image.head.backward(&image_cache, &out.grad_image, &mut grad.image.head);
        let dhidden = self.spot.head.backward(&spot_cache, &out.grad_spot, &mut grad.spot.head);
        self.spot.linear.backward(expressions, dhidden.view(), &mut grad.spot.linear);

        let mut work: Vec<(usize, _)> = caches.into_iter().enumerate().collect();
        let mut chunks = Vec::new();
        while !work.is_empty() {
            let rest = work.split_off(work.len().min(GRAD_CHUNK));
            chunks.push(std::mem::replace(&mut work, rest));
        }
        let partials: Vec<Backbone> = chunks
            .into_par_iter()
            .map(|chunk| {
                let mut g = zeros_like(backbone);
                for (i, cache) in chunk {
                    let x = backbone_input(&images[i]);
                    let dzi = dz.row(i).to_vec();
                    backbone.backward(&x, cache, &dzi, &mut g);
                }
                g
            })
            .collect();
        for p in &partials {
            accumulate(&mut grad.image.backbone, p);
        }
        Ok((out.value, grad))
    }
}

fn stack_rows(rows: Vec<Vec<f64>>, dim: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, dim), flat).map_err(|e| Error::shape("feature rows", dim, e))
}

impl Module for ImageEncoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.backbone.params(&join(prefix, "backbone"), out);
        self.head.params(&join(prefix, "head"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.backbone.params_mut(&join(prefix, "backbone"), out);
        self.head.params_mut(&join(prefix, "head"), out);
    }
}

impl Module for SpotEncoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.linear.params(&join(prefix, "linear"), out);
        self.head.params(&join(prefix, "head"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.linear.params_mut(&join(prefix, "linear"), out);
        self.head.params_mut(&join(prefix, "head"), out);
    }
}

impl Module for DualEncoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.image.params(&join(prefix, "image"), out);
        self.spot.params(&join(prefix, "spot"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.image.params_mut(&join(prefix, "image"), out);
        self.spot.params_mut(&join(prefix, "spot"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::LayerNorm;
    use ndarray::{array, Array1};
    use rand::Rng;

    fn image(seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = FeatureMap::zeros(256, 256, 3);
        x.data.iter_mut().for_each(|v| *v = rng.random());
        x
    }

    fn model() -> DualEncoder {
        DualEncoder::new(ModelConfig::new(3, 4, BackboneConfig::compact(8)), 7).unwrap()
    }

    #[test]
    fn duplicated_image_gives_identical_rows() {
        let m = model();
        let z = m.image_backbone(&[image(1), image(1)]).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn eval_is_pure_and_per_sample() {
        let m = model();
        let (a, b) = (image(1), image(2));
        let pair = m.encode_images(&[a.clone(), b], Mode::Eval).unwrap();
        let again = m.encode_images(&[a.clone(), image(2)], Mode::Eval).unwrap();
        assert_eq!(pair, again);
        let alone = m.encode_images(&[a], Mode::Eval).unwrap();
        assert_eq!(alone.rows.row(0), pair.rows.row(0));
    }

    #[test]
    fn train_mode_is_seeded() {
        let m = model();
        let x = array![[0.5, 1.0, 2.0], [1.5, 0.0, 0.3]];
        let a = m.encode_spots(x.view(), Mode::Train { seed: 3 }).unwrap();
        let b = m.encode_spots(x.view(), Mode::Train { seed: 3 }).unwrap();
        assert_eq!(a, b);
        let eval = m.encode_spots(x.view(), Mode::Eval).unwrap();
        assert_eq!(eval.rows.dim(), (2, 4));
        assert_ne!(a.rows, eval.rows);
    }

    #[test]
    fn identity_spot_encoder_matches_head_case() {
        let mut m = DualEncoder::new(ModelConfig::new(2, 2, BackboneConfig::compact(4)), 0).unwrap();
        m.spot.linear.weight = Array2::eye(2);
        m.spot.linear.bias = Array1::zeros(2);
        m.spot.head.w1 = Array2::eye(2);
        m.spot.head.b1 = Array1::zeros(2);
        m.spot.head.w2 = Array2::zeros((2, 2));
        m.spot.head.b2 = Array1::zeros(2);
        m.spot.head.norm = LayerNorm::new(2);
        let out = m.encode_spots(array![[1.0, -1.0]].view(), Mode::Eval).unwrap().rows;
        let expected = 0.5 / (0.25f64 + 1e-5).sqrt();
        assert!((out[[0, 0]] - expected).abs() < 1e-12);
        assert!((out[[0, 1]] + expected).abs() < 1e-12);
    }

    #[test]
    fn shapes_are_checked() {
        let m = model();
        assert!(matches!(
            m.encode_spots(Array2::zeros((2, 5)).view(), Mode::Eval),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            m.image_backbone(&[FeatureMap::zeros(256, 256, 1)]),
            Err(Error::ShapeMismatch { .. })
        ));
        let loss = LossConfig::default();
        assert!(matches!(
            m.loss_and_gradients(&[image(1)], Array2::zeros((2, 3)).view(), &loss, Mode::Eval),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn input_standardisation_maps_unit_range() {
        let mut x = FeatureMap::zeros(1, 2, 3);
        x.data = vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.5];
        let y = backbone_input(&x);
        assert_eq!(y.data, vec![-2.0, 0.0, 2.0, -1.0, 1.0, 0.0]);
    }
}
