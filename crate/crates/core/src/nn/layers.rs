//! Parameterized layers: weight storage and seeded initialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::ops::{self, BnCache, BnMode, RunningMoments};
use crate::nn::tensor::{MatmulPar, Scalar, Tensor};
use crate::Result;

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Same-padded stride-1 convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kh: usize, kw: usize, rng: &mut impl Rng) -> Self {
        Conv2d {
            weight: he_normal(&[out_ch, in_ch, kh, kw], in_ch * kh * kw, rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    /// All-zero weights and bias; the untouched layer contributes nothing.
    pub fn zeroed(in_ch: usize, out_ch: usize, kh: usize, kw: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kh, kw]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn forward(&self, x: &Tensor<T>, par: MatmulPar) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, &self.weight, &self.bias, par)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        par: MatmulPar,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        ops::conv2d_backward(x, &self.weight, grad_out, par)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Fully connected layer, `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Dense<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: he_normal(&[d_in, d_out], d_in, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>, par: MatmulPar) -> Result<Tensor<T>> {
        ops::dense_forward(x, &self.weight, &self.bias, par)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        par: MatmulPar,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        ops::dense_backward(x, &self.weight, grad_out, par)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Batch normalization over the channel axis with running eval moments.
#[derive(Clone, Debug)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningMoments<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running: RunningMoments::new(channels),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let (out, cache) = ops::batchnorm_forward(
            x,
            &self.gamma,
            &self.beta,
            self.eps,
            BnMode::Train,
            &mut self.running,
        )?;
        Ok((out, cache.expect("train mode always caches")))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut state = self.running.clone();
        let (out, _) = ops::batchnorm_forward(x, &self.gamma, &self.beta, self.eps, BnMode::Eval, &mut state)?;
        Ok(out)
    }

    pub fn backward(
        &self,
        grad_out: &Tensor<T>,
        cache: &BnCache<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        ops::batchnorm_backward(grad_out, cache, &self.gamma)
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }
}
