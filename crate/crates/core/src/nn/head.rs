use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{gelu, gelu_grad, uniform_matrix, LayerNorm, LayerNormCache};
use super::params::{push_mat, push_mat_mut, push_vec, push_vec_mut, join, Module, ParamView, ParamViewMut};
use crate::error::{Error, Result};

pub const DROPOUT_RATE: f64 = 0.1;

/// Forward-pass mode. Dropout masks in training mode are a pure function of
/// the seed, so a step can be replayed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// `LayerNorm(h1 + Dropout(W2 h1 + b2))` with `h1 = GELU(W1 z + b1)`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub w1: Array2<f64>,
    pub b1: ndarray::Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: ndarray::Array1<f64>,
    pub norm: LayerNorm,
    pub dropout: f64,
}

pub struct HeadCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    mask: Option<Array2<f64>>,
    norm: LayerNormCache,
}

impl ProjectionHead {
    pub fn new(input: usize, output: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        let b_in = 1.0 / (input as f64).sqrt();
        let b_out = 1.0 / (output as f64).sqrt();
        Self {
            w1: uniform_matrix(input, output, b_in, rng),
            b1: ndarray::Array1::zeros(output),
            w2: uniform_matrix(output, output, b_out, rng),
            b2: ndarray::Array1::zeros(output),
            norm: LayerNorm::new(output),
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// Inverted-dropout keep mask scaled by `1 / (1 - rate)`.
    fn dropout_mask(&self, rows: usize, seed: u64) -> Option<Array2<f64>> {
        if self.dropout == 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(Array2::from_shape_fn((rows, self.output_dim()), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }

    pub fn forward(&self, z: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self.forward_cached(z, mode)?.0)
    }

    pub fn forward_cached(&self, z: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, HeadCache)> {
        if z.ncols() != self.input_dim() {
            return Err(Error::shape("projection head input", self.input_dim(), z.ncols()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("projection head input".into()));
        }
        let pre1 = z.dot(&self.w1) + &self.b1;
        let h1 = pre1.mapv(gelu);
        let mut h2 = h1.dot(&self.w2) + &self.b2;
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => self.dropout_mask(z.nrows(), seed),
        };
        if let Some(m) = &mask {
            h2 *= m;
        }
        let (out, norm) = self.norm.forward(&(&h1 + &h2));
        Ok((
            out,
            HeadCache {
                input: z.to_owned(),
                pre1,
                h1,
                mask,
                norm,
            },
        ))
    }

    /// Returns `dLoss/dz` and accumulates parameter gradients into `grad`.
    pub fn backward(&self, cache: &HeadCache, dout: &Array2<f64>, grad: &mut ProjectionHead) -> Array2<f64> {
        let du = self.norm.backward(&cache.norm, dout, &mut grad.norm);
        let mut dpre2 = du.clone();
        if let Some(m) = &cache.mask {
            dpre2 *= m;
        }
        grad.w2 += &cache.h1.t().dot(&dpre2);
        grad.b2 += &dpre2.sum_axis(ndarray::Axis(0));
        let mut dpre1 = du + dpre2.dot(&self.w2.t());
        Zip::from(&mut dpre1).and(&cache.pre1).for_each(|g, &x| *g *= gelu_grad(x));
        grad.w1 += &cache.input.t().dot(&dpre1);
        grad.b1 += &dpre1.sum_axis(ndarray::Axis(0));
        dpre1.dot(&self.w1.t())
    }
}

impl Module for ProjectionHead {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push_mat(out, prefix, "W1", &self.w1, true);
        push_vec(out, prefix, "b1", &self.b1, true);
        push_mat(out, prefix, "W2", &self.w2, true);
        push_vec(out, prefix, "b2", &self.b2, true);
        self.norm.params(&join(prefix, "norm"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_mat_mut(out, prefix, "W1", &mut self.w1, true);
        push_vec_mut(out, prefix, "b1", &mut self.b1, true);
        push_mat_mut(out, prefix, "W2", &mut self.w2, true);
        push_vec_mut(out, prefix, "b2", &mut self.b2, true);
        self.norm.params_mut(&join(prefix, "norm"), out);
    }
}
