//! Functional forms of the network layers.
//!
//! These run a single layer outside of a [`Graph`](crate::graph::Graph); the
//! graph builds on the same kernels, so both paths agree bit for bit.

use crate::error::{invalid, shape_err, Result};
use crate::graph::BatchStats;
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::{Element, IntTensor, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

/// Convolution weights `[out, in, k, k]` with bias `[out]`.
///
/// For [`transposed_conv2d`] the same layout is read as `[in, out, k, k]`
/// with bias over the second axis, which makes the transposed convolution
/// the exact adjoint of [`conv2d`] with identical weights.
#[derive(Clone, Debug)]
pub struct Conv2dParams<F: Element = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Element> Conv2dParams<F> {
    pub fn new(weight: Tensor<F>, bias: Tensor<F>, stride: usize, padding: usize) -> Result<Self> {
        let (_, _, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(shape_err!("kernels must be square, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(invalid!("stride must be at least 1"));
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Zero-bias parameters.
    pub fn without_bias(weight: Tensor<F>, bias_len: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(weight, Tensor::zeros(&[bias_len]), stride, padding)
    }
}

pub fn conv2d<F: Element>(x: &Tensor<F>, p: &Conv2dParams<F>) -> Result<Tensor<F>> {
    kernels::conv2d(x, &p.weight, Some(&p.bias), p.stride, p.padding)
}

/// Output size `(H - 1)·stride - 2·pad + k` per spatial axis.
pub fn transposed_conv2d<F: Element>(x: &Tensor<F>, p: &Conv2dParams<F>) -> Result<Tensor<F>> {
    kernels::conv_transpose2d(x, &p.weight, Some(&p.bias), p.stride, p.padding)
}

#[derive(Clone, Debug)]
pub struct PoolResult<F: Element = f32> {
    pub output: Tensor<F>,
    /// Within-window flat position (`0..4`, row-major) of each maximum.
    pub indices: IntTensor,
}

pub fn maxpool2x2<F: Element>(x: &Tensor<F>) -> Result<PoolResult<F>> {
    let (output, indices) = kernels::maxpool2x2(x)?;
    Ok(PoolResult { output, indices })
}

pub fn max_unpool2x2<F: Element>(y: &Tensor<F>, indices: &IntTensor, out_shape: &[usize]) -> Result<Tensor<F>> {
    kernels::max_unpool2x2(y, indices, out_shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormState<F: Element = f32> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BatchNormMode,
}

impl<F: Element> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], F::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: BatchNormMode::Train,
        }
    }
}

/// Exponential moving update of running statistics.
pub fn update_running_stats<F: Element>(
    running_mean: &mut Tensor<F>,
    running_var: &mut Tensor<F>,
    stats: &BatchStats,
    momentum: f64,
) {
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = F::of_f64((1.0 - momentum) * r.as_f64() + momentum * m);
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = F::of_f64(((1.0 - momentum) * r.as_f64() + momentum * v).max(0.0));
    }
}

/// Train mode normalizes with batch statistics and updates the running
/// estimates; eval mode normalizes with the running estimates.
pub fn batchnorm<F: Element>(x: &Tensor<F>, s: &mut BatchNormState<F>) -> Result<Tensor<F>> {
    if s.epsilon <= 0.0 {
        return Err(invalid!("batchnorm epsilon must be positive"));
    }
    if !(0.0..1.0).contains(&s.momentum) || s.momentum == 0.0 {
        return Err(invalid!("batchnorm momentum must be in (0, 1)"));
    }
    match s.mode {
        BatchNormMode::Train => {
            let (mean, var, count) = kernels::channel_stats(x)?;
            if count < 2 {
                return Err(invalid!(
                    "training-mode batchnorm needs N·H·W >= 2, got {count}"
                ));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + s.epsilon).sqrt()).collect();
            let out = kernels::affine_normalize(x, &mean, &inv_std, &s.gamma, &s.beta)?;
            let n = count as f64;
            let stats = BatchStats {
                mean,
                var: var.iter().map(|v| v * n / (n - 1.0)).collect(),
            };
            update_running_stats(&mut s.running_mean, &mut s.running_var, &stats, s.momentum);
            Ok(out)
        }
        BatchNormMode::Eval => {
            let mean: Vec<f64> = s.running_mean.data().iter().map(|v| v.as_f64()).collect();
            let inv_std: Vec<f64> = s
                .running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v.as_f64() + s.epsilon).sqrt())
                .collect();
            kernels::affine_normalize(x, &mean, &inv_std, &s.gamma, &s.beta)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    /// Identity.
    Off,
    /// Active during training.
    Train,
    /// Active at inference for Monte Carlo sampling.
    McSample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    pub rate: f64,
    pub mode: DropoutMode,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            rate: DEFAULT_DROPOUT_RATE,
            mode: DropoutMode::Train,
        }
    }
}

/// Inverted dropout. `Train` and `McSample` behave identically.
pub fn dropout<F: Element>(x: &Tensor<F>, cfg: &DropoutConfig, rng: &mut Rng) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&cfg.rate) {
        return Err(invalid!("dropout rate must be in [0, 1), got {}", cfg.rate));
    }
    if cfg.mode == DropoutMode::Off || cfg.rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - cfg.rate;
    let scale = F::of_f64(1.0 / keep);
    Ok(x.map_with_rng(rng, |v, r| if r.bernoulli(keep) { v * scale } else { F::zero() }))
}

impl<F: Element> Tensor<F> {
    fn map_with_rng(&self, rng: &mut Rng, f: impl Fn(F, &mut Rng) -> F) -> Self {
        let data: Vec<F> = self.data().iter().map(|&v| f(v, rng)).collect();
        Tensor::new(self.shape(), data).expect("same shape")
    }
}

/// Per-pixel softmax over classes and the mean cross-entropy against
/// `target` (`[N, H, W]`). Probabilities are floored at `1e-12` inside the
/// log.
pub fn softmax_ce<F: Element>(logits: &Tensor<F>, target: &IntTensor) -> Result<(F, Tensor<F>)> {
    kernels::softmax_ce(logits, target)
}

pub fn softmax<F: Element>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    kernels::softmax_channels(logits)
}

/// Align-corners-false bilinear upsampling by an integer factor.
pub fn bilinear_upsample<F: Element>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    kernels::bilinear_upsample(x, factor)
}
