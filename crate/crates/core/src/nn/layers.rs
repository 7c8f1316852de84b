//! Single-sample layer kernels in channel-last (HWC) layout.
//!
//! Convolutions lower to im2col + GEMM. Backward passes take the cached
//! forward input and return the input gradient while accumulating parameter
//! gradients into a same-shaped layer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Uniform;

use super::params::{push_mat, push_mat_mut, push_vec, push_vec_mut, Module, ParamView, ParamViewMut};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    fn as_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.height * self.width, self.channels), &self.data)
            .expect("feature map length matches its shape")
    }

    fn from_matrix(height: usize, width: usize, m: Array2<f64>) -> Self {
        let channels = m.ncols();
        let data = if m.is_standard_layout() {
            m.into_raw_vec_and_offset().0
        } else {
            m.iter().copied().collect()
        };
        Self {
            height,
            width,
            channels,
            data,
        }
    }
}

pub(crate) fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| rng.sample(dist))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[kernel * kernel * in_channels, out_channels]`, rows ordered (ky, kx, c_in).
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            weight: uniform_matrix(fan_in, out_channels, bound, rng),
            bias: bias.then(|| Array1::zeros(out_channels)),
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f64> {
        let (oh, ow) = self.output_size(x.height, x.width);
        let k = self.kernel;
        let c = x.channels;
        let mut col = Array2::<f64>::zeros((oh * ow, k * k * c));
        let cols = col.as_slice_mut().expect("fresh array");
        let row_len = k * k * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let src = (iy as usize * x.width + ix as usize) * c;
                        row[(ky * k + kx) * c..][..c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &Array2<f64>, height: usize, width: usize) -> FeatureMap {
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let c = self.in_channels;
        let mut dx = FeatureMap::zeros(height, width, c);
        let dcol = dcol.as_slice().expect("standard layout");
        let row_len = k * k * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &dcol[(oy * ow + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let dst = (iy as usize * width + ix as usize) * c;
                        for (d, s) in dx.data[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.channels, self.in_channels);
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut out = if self.is_pointwise() {
            x.as_matrix().dot(&self.weight)
        } else {
            self.im2col(x).dot(&self.weight)
        };
        if let Some(b) = &self.bias {
            out += b;
        }
        FeatureMap::from_matrix(oh, ow, out)
    }

    /// Accumulates weight/bias gradients into `grad`; returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        x: &FeatureMap,
        dy: &FeatureMap,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let dy_m = dy.as_matrix();
        if let Some(gb) = &mut grad.bias {
            *gb += &dy_m.sum_axis(Axis(0));
        }
        if self.is_pointwise() {
            let xm = x.as_matrix();
            grad.weight += &xm.t().dot(&dy_m);
            need_input_grad
                .then(|| FeatureMap::from_matrix(x.height, x.width, dy_m.dot(&self.weight.t())))
        } else {
            let col = self.im2col(x);
            grad.weight += &col.t().dot(&dy_m);
            drop(col);
            need_input_grad.then(|| {
                let dcol = dy_m.dot(&self.weight.t());
                self.col2im(&dcol, x.height, x.width)
            })
        }
    }
}

impl Module for Conv2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push_mat(out, prefix, "weight", &self.weight, true);
        if let Some(b) = &self.bias {
            push_vec(out, prefix, "bias", b, true);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_mat_mut(out, prefix, "weight", &mut self.weight, true);
        if let Some(b) = &mut self.bias {
            push_vec_mut(out, prefix, "bias", b, true);
        }
    }
}

/// Batch normalisation with fixed running statistics; only the affine part
/// is trained. This keeps every sample independent of its batch mates.
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

const BN_EPS: f64 = 1e-5;

impl FrozenBatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    fn inv_std(&self) -> Array1<f64> {
        self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt())
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let inv = self.inv_std();
        let c = x.channels;
        let scale: Vec<f64> = (0..c).map(|i| self.gamma[i] * inv[i]).collect();
        let shift: Vec<f64> = (0..c)
            .map(|i| self.beta[i] - self.running_mean[i] * scale[i])
            .collect();
        let mut out = x.clone();
        for px in out.data.chunks_exact_mut(c) {
            for ((v, s), t) in px.iter_mut().zip(&scale).zip(&shift) {
                *v = *v * s + t;
            }
        }
        out
    }

    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut FrozenBatchNorm) -> FeatureMap {
        let inv = self.inv_std();
        let c = x.channels;
        let mut dx = dy.clone();
        let gg = grad.gamma.as_slice_mut().expect("contiguous");
        let gb = grad.beta.as_slice_mut().expect("contiguous");
        for (px, (dpx, xpx)) in dx
            .data
            .chunks_exact_mut(c)
            .zip(dy.data.chunks_exact(c).zip(x.data.chunks_exact(c)))
        {
            for i in 0..c {
                let xhat = (xpx[i] - self.running_mean[i]) * inv[i];
                gg[i] += dpx[i] * xhat;
                gb[i] += dpx[i];
                px[i] = dpx[i] * self.gamma[i] * inv[i];
            }
        }
        dx
    }
}

impl Module for FrozenBatchNorm {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push_vec(out, prefix, "gamma", &self.gamma, true);
        push_vec(out, prefix, "beta", &self.beta, true);
        push_vec(out, prefix, "running_mean", &self.running_mean, false);
        push_vec(out, prefix, "running_var", &self.running_var, false);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_vec_mut(out, prefix, "gamma", &mut self.gamma, true);
        push_vec_mut(out, prefix, "beta", &mut self.beta, true);
        push_vec_mut(out, prefix, "running_mean", &mut self.running_mean, false);
        push_vec_mut(out, prefix, "running_var", &mut self.running_var, false);
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` where the (post-activation) output was not positive.
pub fn relu_backward_inplace(activated: &FeatureMap, dy: &mut FeatureMap) {
    for (d, a) in dy.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU `x σ(x)` in place.
pub fn silu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        *v *= sigmoid(*v);
    }
}

/// SiLU in place, also returning `σ(x)` for [`silu_backward_inplace`].
pub fn silu_cached(x: &mut FeatureMap) -> Vec<f64> {
    x.data
        .iter_mut()
        .map(|v| {
            let s = sigmoid(*v);
            *v *= s;
            s
        })
        .collect()
}

/// Scales `dy` by `σ(x) + y (1 - σ(x))`, the SiLU derivative written in
/// terms of the output `y` and the cached `σ(x)`.
pub fn silu_backward_inplace(activated: &FeatureMap, sigma: &[f64], dy: &mut FeatureMap) {
    for ((d, y), s) in dy.data.iter_mut().zip(&activated.data).zip(sigma) {
        *d *= s + y * (1.0 - s);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    /// Returns the pooled map and, per output element, the flat index of
    /// the winning input element.
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
        let oh = (x.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (x.width + 2 * self.padding - self.kernel) / self.stride + 1;
        let c = x.channels;
        let mut out = FeatureMap::zeros(oh, ow, c);
        let mut arg = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let idx = (iy as usize * x.width + ix as usize) * c + ch;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    out.data[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        (out, arg)
    }

    pub fn backward(input_shape: (usize, usize, usize), arg: &[usize], dy: &FeatureMap) -> FeatureMap {
        let (h, w, c) = input_shape;
        let mut dx = FeatureMap::zeros(h, w, c);
        for (&i, &g) in arg.iter().zip(&dy.data) {
            dx.data[i] += g;
        }
        dx
    }
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0; x.channels];
    for px in x.data.chunks_exact(x.channels) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (x.height * x.width) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn global_avg_pool_backward(dz: &[f64], height: usize, width: usize) -> FeatureMap {
    let n = (height * width) as f64;
    let scaled: Vec<f64> = dz.iter().map(|g| g / n).collect();
    let mut dx = FeatureMap::zeros(height, width, dz.len());
    for px in dx.data.chunks_exact_mut(dz.len()) {
        px.copy_from_slice(&scaled);
    }
    dx
}

/// Row-batched affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform_matrix(input, output, bound, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Module for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push_mat(out, prefix, "W", &self.weight, true);
        push_vec(out, prefix, "b", &self.bias, true);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_mat_mut(out, prefix, "W", &mut self.weight, true);
        push_vec_mut(out, prefix, "b", &mut self.bias, true);
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * *inv);
        }
        let out = &normalized * &self.gain + &self.bias;
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), inv) in dx
            .axis_iter_mut(Axis(0))
            .zip(cache.normalized.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            for (g, x) in row.iter_mut().zip(xhat.iter()) {
                *g = inv * (*g - mean_g - x * mean_gx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push_vec(out, prefix, "gain", &self.gain, true);
        push_vec(out, prefix, "bias", &self.bias, true);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_vec_mut(out, prefix, "gain", &mut self.gain, true);
        push_vec_mut(out, prefix, "bias", &mut self.bias, true);
    }
}
