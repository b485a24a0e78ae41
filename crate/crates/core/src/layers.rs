//! Small parameterized building blocks shared by the backbone, neck and heads.

use rand::Rng;

use crate::error::Result;
use crate::impl_module;
use crate::tensor::{
    conv2d, conv2d_backward, norm_act, norm_act_backward, NormCache, NormStats, RunningStats,
    StatsMode, Tensor, BN_EPS, BN_MOMENTUM,
};

/// He-style initialization for a conv weight.
pub fn init_conv_weight<R: Rng + ?Sized>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Plain convolution with bias, no activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl_module!(Conv { weight, bias });

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: init_conv_weight(c_out, c_in, k, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    /// Returns the input gradient and accumulates parameter gradients into `grads`.
    pub fn backward(&self, grad_out: &Tensor, x: &Tensor, grads: &mut Conv) -> Result<Tensor> {
        let g = conv2d_backward(grad_out, x, &self.weight, self.stride, self.padding)?;
        grads.weight.add_assign(&g.weight)?;
        grads.bias.add_assign(&g.bias)?;
        Ok(g.input)
    }
}

/// Affine normalization parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl_module!(Norm { gamma, beta, stats });

impl Norm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: StatsMode) -> Result<(Tensor, NormCache)> {
        let stats = match mode {
            StatsMode::Batch => NormStats::Batch,
            StatsMode::Running => NormStats::Running(&self.stats),
        };
        norm_act(x, &self.gamma, &self.beta, stats, BN_EPS)
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: &NormCache,
        grads: &mut Norm,
    ) -> Result<Tensor> {
        let g = norm_act_backward(grad_out, cache, &self.gamma)?;
        grads.gamma.add_assign(&g.gamma)?;
        grads.beta.add_assign(&g.beta)?;
        Ok(g.input)
    }

    pub fn absorb(&mut self, cache: &NormCache) {
        self.stats
            .update(&cache.batch_mean, &cache.batch_var, BN_MOMENTUM);
    }
}

/// Conv → norm → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl_module!(ConvBlock { conv, norm });

#[derive(Clone, Debug)]
pub struct ConvBlockCache {
    input: Tensor,
    norm: NormCache,
}

impl ConvBlockCache {
    pub fn norm(&self) -> &NormCache {
        &self.norm
    }
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv::new(c_in, c_out, k, stride, rng),
            norm: Norm::new(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: StatsMode) -> Result<(Tensor, ConvBlockCache)> {
        let z = self.conv.forward(x)?;
        let (y, norm) = self.norm.forward(&z, mode)?;
        Ok((
            y,
            ConvBlockCache {
                input: x.clone(),
                norm,
            },
        ))
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: &ConvBlockCache,
        grads: &mut ConvBlock,
    ) -> Result<Tensor> {
        let gz = self.norm.backward(grad_out, &cache.norm, &mut grads.norm)?;
        self.conv.backward(&gz, &cache.input, &mut grads.conv)
    }
}
