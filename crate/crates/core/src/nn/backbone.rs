//! Convolutional image backbones mapping one HWC patch to a pooled feature
//! vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, silu_backward_inplace,
    silu_cached, silu_inplace, Conv2d, FeatureMap, FrozenBatchNorm, MaxPool2d,
};
use super::params::{join, Module, ParamView, ParamViewMut};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Stride-2 3x3 conv + SiLU blocks followed by global average pooling.
    Compact { channels: Vec<usize> },
    /// Bottleneck residual network with frozen batch-norm statistics.
    Residual {
        stem_channels: usize,
        blocks: Vec<usize>,
        widths: Vec<usize>,
        expansion: usize,
    },
}

impl BackboneConfig {
    pub const DEFAULT_COMPACT_FEATURES: usize = 32;

    /// Three blocks widening to `feature_dim`.
    pub fn compact(feature_dim: usize) -> Self {
        BackboneConfig::Compact {
            channels: vec![(feature_dim / 4).max(1), (feature_dim / 2).max(1), feature_dim],
        }
    }

    /// The 50-layer layout: blocks (3, 4, 6, 3), 2048 pooled features.
    pub fn residual50() -> Self {
        BackboneConfig::Residual {
            stem_channels: 64,
            blocks: vec![3, 4, 6, 3],
            widths: vec![64, 128, 256, 512],
            expansion: 4,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneConfig::Compact { channels } => *channels.last().unwrap_or(&0),
            BackboneConfig::Residual { widths, expansion, .. } => widths.last().unwrap_or(&0) * expansion,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            BackboneConfig::Compact { .. } => "compact",
            BackboneConfig::Residual { .. } if *self == Self::residual50() => "residual50",
            BackboneConfig::Residual { .. } => "residual",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneConfig::Compact { channels } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::InvalidConfig("compact backbone needs non-zero channels".into()));
                }
            }
            BackboneConfig::Residual {
                stem_channels,
                blocks,
                widths,
                expansion,
            } => {
                if *stem_channels == 0 || blocks.is_empty() || blocks.len() != widths.len() || *expansion == 0 {
                    return Err(Error::InvalidConfig("inconsistent residual backbone layout".into()));
                }
            }
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::compact(Self::DEFAULT_COMPACT_FEATURES)
    }
}

#[derive(Debug, Clone)]
pub struct CompactBackbone {
    pub blocks: Vec<Conv2d>,
}

impl CompactBackbone {
    pub fn new(channels: &[usize], rng: &mut impl Rng) -> Self {
        let mut input = 3;
        let blocks = channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(input, c, 3, 2, 1, true, rng);
                input = c;
                conv
            })
            .collect();
        Self { blocks }
    }

    fn forward(&self, x: &FeatureMap) -> Vec<f64> {
        let mut a = self.blocks[0].forward(x);
        silu_inplace(&mut a);
        for conv in &self.blocks[1..] {
            a = conv.forward(&a);
            silu_inplace(&mut a);
        }
        global_avg_pool(&a)
    }

    /// Block outputs (post-activation) with their sigmoid gates; the input
    /// itself is not retained.
    fn forward_cached(&self, x: &FeatureMap) -> (Vec<f64>, Vec<(FeatureMap, Vec<f64>)>) {
        let mut acts: Vec<(FeatureMap, Vec<f64>)> = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let mut a = conv.forward(acts.last().map_or(x, |(a, _)| a));
            let gate = silu_cached(&mut a);
            acts.push((a, gate));
        }
        let z = global_avg_pool(&acts.last().expect("at least one block").0);
        (z, acts)
    }

    fn backward(&self, x: &FeatureMap, acts: Vec<(FeatureMap, Vec<f64>)>, dz: &[f64], grad: &mut CompactBackbone) {
        let last = &acts.last().expect("at least one block").0;
        let mut d = global_avg_pool_backward(dz, last.height, last.width);
        for i in (0..self.blocks.len()).rev() {
            silu_backward_inplace(&acts[i].0, &acts[i].1, &mut d);
            let input = if i == 0 { x } else { &acts[i - 1].0 };
            match self.blocks[i].backward(input, &d, &mut grad.blocks[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl Module for CompactBackbone {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &format!("block{i}")), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("block{i}")), out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub bn1: FrozenBatchNorm,
    pub conv2: Conv2d,
    pub bn2: FrozenBatchNorm,
    pub conv3: Conv2d,
    pub bn3: FrozenBatchNorm,
    pub downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

struct BottleneckCache {
    x: FeatureMap,
    u1: FeatureMap,
    t1: FeatureMap,
    u2: FeatureMap,
    t2: FeatureMap,
    u3: FeatureMap,
    ud: Option<FeatureMap>,
    y: FeatureMap,
}

impl Bottleneck {
    fn new(input: usize, width: usize, expansion: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let out = width * expansion;
        let mut bn3 = FrozenBatchNorm::new(out);
        // Zero-init the last affine scale so fresh blocks start as identities.
        bn3.gamma.fill(0.0);
        let downsample = (stride != 1 || input != out).then(|| {
            (Conv2d::new(input, out, 1, stride, 0, false, rng), FrozenBatchNorm::new(out))
        });
        Self {
            conv1: Conv2d::new(input, width, 1, 1, 0, false, rng),
            bn1: FrozenBatchNorm::new(width),
            conv2: Conv2d::new(width, width, 3, stride, 1, false, rng),
            bn2: FrozenBatchNorm::new(width),
            conv3: Conv2d::new(width, out, 1, 1, 0, false, rng),
            bn3,
            downsample,
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut t = self.bn1.forward(&self.conv1.forward(x));
        relu_inplace(&mut t);
        let mut t = self.bn2.forward(&self.conv2.forward(&t));
        relu_inplace(&mut t);
        let mut y = self.bn3.forward(&self.conv3.forward(&t));
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)),
            None => x.clone(),
        };
        for (a, b) in y.data.iter_mut().zip(&shortcut.data) {
            *a += b;
        }
        relu_inplace(&mut y);
        y
    }

    fn forward_cached(&self, x: FeatureMap) -> BottleneckCache {
        let u1 = self.conv1.forward(&x);
        let mut t1 = self.bn1.forward(&u1);
        relu_inplace(&mut t1);
        let u2 = self.conv2.forward(&t1);
        let mut t2 = self.bn2.forward(&u2);
        relu_inplace(&mut t2);
        let u3 = self.conv3.forward(&t2);
        let mut y = self.bn3.forward(&u3);
        let ud = self.downsample.as_ref().map(|(conv, _)| conv.forward(&x));
        match (&self.downsample, &ud) {
            (Some((_, bn)), Some(ud)) => {
                for (a, b) in y.data.iter_mut().zip(&bn.forward(ud).data) {
                    *a += b;
                }
            }
            _ => {
                for (a, b) in y.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
            }
        }
        relu_inplace(&mut y);
        BottleneckCache {
            x,
            u1,
            t1,
            u2,
            t2,
            u3,
            ud,
            y,
        }
    }

    fn backward(&self, cache: &BottleneckCache, mut dy: FeatureMap, grad: &mut Bottleneck, need_dx: bool) -> Option<FeatureMap> {
        relu_backward_inplace(&cache.y, &mut dy);
        let du3 = self.bn3.backward(&cache.u3, &dy, &mut grad.bn3);
        let mut dt2 = self.conv3.backward(&cache.t2, &du3, &mut grad.conv3, true)?;
        relu_backward_inplace(&cache.t2, &mut dt2);
        let du2 = self.bn2.backward(&cache.u2, &dt2, &mut grad.bn2);
        let mut dt1 = self.conv2.backward(&cache.t1, &du2, &mut grad.conv2, true)?;
        relu_backward_inplace(&cache.t1, &mut dt1);
        let du1 = self.bn1.backward(&cache.u1, &dt1, &mut grad.bn1);
        let dx = self.conv1.backward(&cache.x, &du1, &mut grad.conv1, need_dx);
        let short = match (&self.downsample, &cache.ud, &mut grad.downsample) {
            (Some((conv, bn)), Some(ud), Some((gconv, gbn))) => {
                let dud = bn.backward(ud, &dy, gbn);
                conv.backward(&cache.x, &dud, gconv, need_dx)
            }
            _ => need_dx.then_some(dy),
        };
        match (dx, short) {
            (Some(mut dx), Some(short)) => {
                for (a, b) in dx.data.iter_mut().zip(&short.data) {
                    *a += b;
                }
                Some(dx)
            }
            _ => None,
        }
    }
}

impl Module for Bottleneck {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.conv1.params(&join(prefix, "conv1"), out);
        self.bn1.params(&join(prefix, "bn1"), out);
        self.conv2.params(&join(prefix, "conv2"), out);
        self.bn2.params(&join(prefix, "bn2"), out);
        self.conv3.params(&join(prefix, "conv3"), out);
        self.bn3.params(&join(prefix, "bn3"), out);
        if let Some((c, b)) = &self.downsample {
            c.params(&join(prefix, "downsample.conv"), out);
            b.params(&join(prefix, "downsample.bn"), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.conv1.params_mut(&join(prefix, "conv1"), out);
        self.bn1.params_mut(&join(prefix, "bn1"), out);
        self.conv2.params_mut(&join(prefix, "conv2"), out);
        self.bn2.params_mut(&join(prefix, "bn2"), out);
        self.conv3.params_mut(&join(prefix, "conv3"), out);
        self.bn3.params_mut(&join(prefix, "bn3"), out);
        if let Some((c, b)) = &mut self.downsample {
            c.params_mut(&join(prefix, "downsample.conv"), out);
            b.params_mut(&join(prefix, "downsample.bn"), out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBackbone {
    pub stem: Conv2d,
    pub stem_bn: FrozenBatchNorm,
    pub pool: MaxPool2d,
    pub stages: Vec<Vec<Bottleneck>>,
}

struct ResidualCache {
    u0: FeatureMap,
    t0: FeatureMap,
    pool_arg: Vec<usize>,
    blocks: Vec<BottleneckCache>,
    last: FeatureMap,
}

impl ResidualBackbone {
    pub fn new(stem_channels: usize, blocks: &[usize], widths: &[usize], expansion: usize, rng: &mut impl Rng) -> Self {
        let stem = Conv2d::new(3, stem_channels, 7, 2, 3, false, rng);
        let mut input = stem_channels;
        let stages = blocks
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(s, (&n, &w))| {
                (0..n)
                    .map(|b| {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let block = Bottleneck::new(input, w, expansion, stride, rng);
                        input = w * expansion;
                        block
                    })
                    .collect()
            })
            .collect();
        Self {
            stem,
            stem_bn: FrozenBatchNorm::new(stem_channels),
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            stages,
        }
    }

    /// Final feature map before pooling (8x8 spatial for a 256x256 input).
    pub fn feature_map(&self, x: &FeatureMap) -> FeatureMap {
        let mut t = self.stem_bn.forward(&self.stem.forward(x));
        relu_inplace(&mut t);
        let (mut a, _) = self.pool.forward(&t);
        for block in self.stages.iter().flatten() {
            a = block.forward(&a);
        }
        a
    }

    fn forward_cached(&self, x: &FeatureMap) -> (Vec<f64>, ResidualCache) {
        let u0 = self.stem.forward(x);
        let mut t0 = self.stem_bn.forward(&u0);
        relu_inplace(&mut t0);
        let (mut a, pool_arg) = self.pool.forward(&t0);
        let mut blocks = Vec::new();
        for block in self.stages.iter().flatten() {
            let cache = block.forward_cached(a);
            a = cache.y.clone();
            blocks.push(cache);
        }
        let z = global_avg_pool(&a);
        (
            z,
            ResidualCache {
                u0,
                t0,
                pool_arg,
                blocks,
                last: a,
            },
        )
    }

    fn backward(&self, x: &FeatureMap, cache: ResidualCache, dz: &[f64], grad: &mut ResidualBackbone) {
        let mut d = global_avg_pool_backward(dz, cache.last.height, cache.last.width);
        let flat: Vec<&Bottleneck> = self.stages.iter().flatten().collect();
        let mut gflat: Vec<&mut Bottleneck> = grad.stages.iter_mut().flatten().collect();
        for (i, block) in flat.iter().enumerate().rev() {
            d = block
                .backward(&cache.blocks[i], d, gflat[i], true)
                .expect("input gradient requested");
        }
        let t0 = &cache.t0;
        let mut dt0 = MaxPool2d::backward((t0.height, t0.width, t0.channels), &cache.pool_arg, &d);
        relu_backward_inplace(t0, &mut dt0);
        let du0 = self.stem_bn.backward(&cache.u0, &dt0, &mut grad.stem_bn);
        self.stem.backward(x, &du0, &mut grad.stem, false);
    }
}

impl Module for ResidualBackbone {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.stem.params(&join(prefix, "stem.conv"), out);
        self.stem_bn.params(&join(prefix, "stem.bn"), out);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.params(&join(prefix, &format!("layer{}.{b}", s + 1)), out);
            }
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.stem.params_mut(&join(prefix, "stem.conv"), out);
        self.stem_bn.params_mut(&join(prefix, "stem.bn"), out);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.params_mut(&join(prefix, &format!("layer{}.{b}", s + 1)), out);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Compact(CompactBackbone),
    Residual(ResidualBackbone),
}

/// Activations retained by [`Backbone::forward_cached`] for the backward pass.
pub struct BackboneCache(CacheInner);

enum CacheInner {
    Compact(Vec<(FeatureMap, Vec<f64>)>),
    Residual(Box<ResidualCache>),
}

impl Backbone {
    pub fn new(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        match config {
            BackboneConfig::Compact { channels } => Backbone::Compact(CompactBackbone::new(channels, rng)),
            BackboneConfig::Residual {
                stem_channels,
                blocks,
                widths,
                expansion,
            } => Backbone::Residual(ResidualBackbone::new(*stem_channels, blocks, widths, *expansion, rng)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Compact(c) => c.blocks.last().map_or(0, |b| b.out_channels),
            Backbone::Residual(r) => r
                .stages
                .last()
                .and_then(|s| s.last())
                .map_or(0, |b| b.conv3.out_channels),
        }
    }

    /// Pooled features for one image. Backbones have no stochastic layers,
    /// so this serves both training and evaluation.
    pub fn forward(&self, x: &FeatureMap) -> Vec<f64> {
        match self {
            Backbone::Compact(c) => c.forward(x),
            Backbone::Residual(r) => global_avg_pool(&r.feature_map(x)),
        }
    }

    /// Like [`Backbone::forward`] but keeps the intermediate activations.
    /// The input is borrowed, not stored, and must be passed again to
    /// [`Backbone::backward`].
    pub fn forward_cached(&self, x: &FeatureMap) -> (Vec<f64>, BackboneCache) {
        match self {
            Backbone::Compact(c) => {
                let (z, acts) = c.forward_cached(x);
                (z, BackboneCache(CacheInner::Compact(acts)))
            }
            Backbone::Residual(r) => {
                let (z, cache) = r.forward_cached(x);
                (z, BackboneCache(CacheInner::Residual(Box::new(cache))))
            }
        }
    }

    /// Accumulates parameter gradients for `dz = dLoss/dfeatures` into `grad`.
    pub fn backward(&self, x: &FeatureMap, cache: BackboneCache, dz: &[f64], grad: &mut Backbone) {
        match (self, cache.0, grad) {
            (Backbone::Compact(c), CacheInner::Compact(acts), Backbone::Compact(g)) => c.backward(x, acts, dz, g),
            (Backbone::Residual(r), CacheInner::Residual(cache), Backbone::Residual(g)) => {
                r.backward(x, *cache, dz, g)
            }
            _ => panic!("backbone, cache and gradient kinds disagree"),
        }
    }
}

impl Module for Backbone {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        match self {
            Backbone::Compact(c) => c.params(prefix, out),
            Backbone::Residual(r) => r.params(prefix, out),
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        match self {
            Backbone::Compact(c) => c.params_mut(prefix, out),
            Backbone::Residual(r) => r.params_mut(prefix, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = FeatureMap::zeros(256, 256, 3);
        x.data.iter_mut().for_each(|v| *v = rng.random());
        x
    }

    #[test]
    fn zero_compact_backbone_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Backbone::new(&BackboneConfig::compact(8), &mut rng);
        for p in b.named_params_mut() {
            p.data.fill(0.0);
        }
        assert_eq!(b.forward(&FeatureMap::zeros(256, 256, 3)), vec![0.0; 8]);
    }

    #[test]
    fn compact_layout() {
        assert_eq!(BackboneConfig::compact(32), BackboneConfig::Compact { channels: vec![8, 16, 32] });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::new(&BackboneConfig::default(), &mut rng);
        assert_eq!(b.feature_dim(), 32);
        assert_eq!(b.forward(&patch(1)).len(), 32);
    }

    #[test]
    fn residual50_pools_2048_features_from_8x8_map() {
        let cfg = BackboneConfig::residual50();
        assert_eq!(cfg.feature_dim(), 2048);
        assert_eq!(cfg.label(), "residual50");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let Backbone::Residual(r) = Backbone::new(&cfg, &mut rng) else {
            panic!("expected a residual backbone");
        };
        let blocks: usize = r.stages.iter().map(Vec::len).sum();
        assert_eq!(blocks, 16);
        let map = r.feature_map(&patch(2));
        assert_eq!((map.height, map.width, map.channels), (8, 8, 2048));
        let b = Backbone::Residual(r);
        assert_eq!(b.feature_dim(), 2048);
    }

    #[test]
    fn cached_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tiny = BackboneConfig::Residual {
            stem_channels: 2,
            blocks: vec![1, 1],
            widths: vec![2, 2],
            expansion: 2,
        };
        for cfg in [BackboneConfig::compact(8), tiny] {
            let b = Backbone::new(&cfg, &mut rng);
            let x = patch(4);
            assert_eq!(b.forward(&x), b.forward_cached(&x).0);
        }
    }

    #[test]
    fn invalid_layouts_rejected() {
        assert!(BackboneConfig::Compact { channels: vec![] }.validate().is_err());
        assert!(BackboneConfig::Compact { channels: vec![4, 0] }.validate().is_err());
        let bad = BackboneConfig::Residual {
            stem_channels: 4,
            blocks: vec![1, 1],
            widths: vec![4],
            expansion: 4,
        };
        assert!(bad.validate().is_err());
    }
}
