//! Building blocks shared by all three branches: convolutions, batch
//! normalization, activations and squeeze-and-excitation.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Appends `(name, tensor)` pairs for every stored tensor of a layer.
pub trait NamedTensors {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    /// Non-trainable state such as running statistics.
    fn named_buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor)>) {}
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).requires_grad()
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `[out, in, k, k]` for [`conv2d`]; `[in, out, k, k]` for
    /// [`transposed_conv2d`].
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Forward convolution, padding `k / 2`, He-uniform weights, zero bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut SplitMix64) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::Config(format!("kernel size must be 1 or 3, got {k}")));
        }
        Ok(ConvParams {
            weight: he_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
            bias: Tensor::zeros(&[out_ch]).requires_grad(),
            stride: 1,
            padding: k / 2,
        })
    }

    /// 3x3 stride-2 upsampling kernel for [`transposed_conv2d`].
    pub fn upsample(in_ch: usize, out_ch: usize, rng: &mut SplitMix64) -> Self {
        ConvParams {
            weight: he_uniform(&[in_ch, out_ch, 3, 3], in_ch * 9, rng),
            bias: Tensor::zeros(&[out_ch]).requires_grad(),
            stride: 2,
            padding: 1,
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        ConvParams { weight, bias, stride, padding }
    }
}

impl NamedTensors for ConvParams {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    x.conv2d(&p.weight, Some(&p.bias), p.stride, p.padding)
}

/// Stride-2 transposed convolution that exactly doubles both spatial
/// extents (3x3 kernel, padding 1, output padding 1).
pub fn transposed_conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    if p.stride != 2 || p.padding != 1 || p.weight.shape().get(2) != Some(&3) {
        return Err(Error::Config("transposed_conv2d expects a 3x3 kernel, stride 2, padding 1".into()));
    }
    x.conv_transpose2d(&p.weight, Some(&p.bias), 2, 1, 1)
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(ch: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[ch]).requires_grad(),
            beta: Tensor::zeros(&[ch]).requires_grad(),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::ones(&[ch]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

impl NamedTensors for BatchNormParams {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    fn named_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and folds them into the running estimates (unbiased variance);
/// eval mode uses the running estimates.
pub fn batchnorm(x: &Tensor, p: &BatchNormParams, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            let (y, stats) = x.batch_norm_train(&p.gamma, &p.beta, p.epsilon)?;
            let m = p.momentum;
            let unbias = stats.count as f64 / (stats.count - 1) as f64;
            let mut rm = p.running_mean.data_mut();
            let mut rv = p.running_var.data_mut();
            for c in 0..rm.len() {
                rm[c] = (1.0 - m) * rm[c] + m * stats.mean[c];
                rv[c] = (1.0 - m) * rv[c] + m * stats.var[c] * unbias;
            }
            Ok(y)
        }
        Mode::Eval => x.batch_norm_eval(
            &p.gamma,
            &p.beta,
            &p.running_mean.data(),
            &p.running_var.data(),
            p.epsilon,
        ),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.relu()
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.sigmoid()
}

/// Squeeze-and-excitation weights. Neither projection carries a bias.
#[derive(Debug, Clone)]
pub struct SEParams {
    /// `[ch / r, ch]`
    pub reduce_weight: Tensor,
    /// `[ch, ch / r]`
    pub expand_weight: Tensor,
    pub reduction: usize,
}

impl SEParams {
    pub fn new(ch: usize, reduction: usize, rng: &mut SplitMix64) -> Result<Self> {
        if reduction == 0 || !ch.is_multiple_of(reduction) {
            return Err(Error::Config(format!("SE reduction {reduction} does not divide {ch} channels")));
        }
        let hidden = ch / reduction;
        Ok(SEParams {
            reduce_weight: he_uniform(&[hidden, ch], ch, rng),
            expand_weight: he_uniform(&[ch, hidden], hidden, rng),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce_weight.shape()[1]
    }
}

impl NamedTensors for SEParams {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.reduce_weight"), self.reduce_weight.clone()));
        out.push((format!("{prefix}.expand_weight"), self.expand_weight.clone()));
    }
}

/// Per-channel gates `s ∈ (0, 1)` of shape `[N, C, 1, 1]`.
pub fn se_scale(x: &Tensor, p: &SEParams) -> Result<Tensor> {
    let c = p.channels();
    if x.shape().len() != 4 || x.shape()[1] != c {
        return Err(Error::Shape(format!("SE block for {c} channels got input {:?}", x.shape())));
    }
    let hidden = c / p.reduction;
    let squeeze = x.mean_axes(&[2, 3][..])?;
    let reduce = p.reduce_weight.reshape(&[hidden, c, 1, 1])?;
    let expand = p.expand_weight.reshape(&[c, hidden, 1, 1])?;
    let z = squeeze.conv2d(&reduce, None, 1, 0)?.relu();
    Ok(z.conv2d(&expand, None, 1, 0)?.sigmoid())
}

pub fn se_block(x: &Tensor, p: &SEParams) -> Result<Tensor> {
    x.mul(&se_scale(x, p)?)
}
