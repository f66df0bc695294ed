//! Per-pixel patch regression network: two convolutions with batch
//! normalization, then a fully connected chain that predicts the center
//! pixel's restored value(s) from its 40x40 neighborhood.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, Conv2d, Dense};
use crate::nn::ops::{self, BnCache};
use crate::nn::tensor::{MatmulPar, Scalar, Tensor};
use crate::seeds;

/// Activation of the final dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadActivation {
    Linear,
    Relu,
}

#[derive(Clone, Debug)]
pub struct PatchRegressor<T = f32> {
    pub conv1: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub dense: Vec<Dense<T>>,
    pub head: HeadActivation,
    pub in_channels: usize,
    pub patch: usize,
}

impl<T: Scalar> PatchRegressor<T> {
    /// The published architecture: conv 64@4x4 -> BN -> relu -> conv 32@3x3
    /// -> relu -> flatten -> dense 1024/512/32/in_channels on 40x40 patches.
    pub fn new(in_channels: usize, head: HeadActivation, seed: u64) -> Result<Self> {
        Self::custom(in_channels, 64, 32, &[1024, 512, 32], 40, head, seed)
    }

    /// Same layer kinds at arbitrary widths; used for scaled-down validation
    /// models.
    pub fn custom(
        in_channels: usize,
        conv1_filters: usize,
        conv2_filters: usize,
        hidden: &[usize],
        patch: usize,
        head: HeadActivation,
        seed: u64,
    ) -> Result<Self> {
        if in_channels != 1 && in_channels != 2 {
            return Err(Error::UnsupportedChannels { got: in_channels });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, 0x9a7c4]));
        let conv1 = Conv2d::new(in_channels, conv1_filters, 4, 4, &mut rng);
        let bn = BatchNorm::new(conv1_filters, 1e-5);
        let conv2 = Conv2d::new(conv1_filters, conv2_filters, 3, 3, &mut rng);
        let mut dense = Vec::new();
        let mut d_in = conv2_filters * patch * patch;
        for &d_out in hidden {
            dense.push(Dense::new(d_in, d_out, &mut rng));
            d_in = d_out;
        }
        dense.push(Dense::new(d_in, in_channels, &mut rng));
        Ok(PatchRegressor { conv1, bn, conv2, dense, head, in_channels, patch })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "conv1.weight".into(),
            "conv1.bias".into(),
            "bn.gamma".into(),
            "bn.beta".into(),
            "conv2.weight".into(),
            "conv2.bias".into(),
        ];
        for i in 0..self.dense.len() {
            names.push(format!("dense{i}.weight"));
            names.push(format!("dense{i}.bias"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut ps = vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.conv2.weight,
            &self.conv2.bias,
        ];
        for d in &self.dense {
            ps.push(&d.weight);
            ps.push(&d.bias);
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut ps = vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ];
        for d in &mut self.dense {
            ps.push(&mut d.weight);
            ps.push(&mut d.bias);
        }
        ps
    }

    pub fn param_count(&self) -> u64 {
        self.params().iter().map(|t| t.numel() as u64).sum()
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.shape().len() != 4 {
            return Err(Error::shape("patch model", "input rank", 4, x.shape().len()));
        }
        if x.shape()[1] != self.in_channels {
            return Err(Error::shape("patch model", "channels", self.in_channels, x.shape()[1]));
        }
        if x.shape()[2] != self.patch || x.shape()[3] != self.patch {
            return Err(Error::shape(
                "patch model",
                "patch size",
                self.patch,
                format!("{}x{}", x.shape()[2], x.shape()[3]),
            ));
        }
        Ok((x.shape()[0], self.in_channels))
    }

    /// Training forward over a `[B,C,40,40]` batch; batch normalization uses
    /// batch moments and updates the running state.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, PatchTape<T>)> {
        let (n, _) = self.check_batch(x)?;
        let a1 = ops::conv2d_forward_batch(x, &self.conv1.weight, &self.conv1.bias)?;
        let (b1, bn_cache) = self.bn.forward_train(&a1)?;
        let r1 = ops::relu_forward(&b1);
        let a2 = ops::conv2d_forward_batch(&r1, &self.conv2.weight, &self.conv2.bias)?;
        let r2 = ops::relu_forward(&a2);
        let flat_dim = self.dense[0].in_features();
        let flat = r2.clone().reshaped(&[n, flat_dim])?;

        let mut pre = Vec::with_capacity(self.dense.len());
        let mut act = flat.clone();
        for (i, layer) in self.dense.iter().enumerate() {
            let z = layer.forward(&act, MatmulPar::Parallel)?;
            let is_last = i + 1 == self.dense.len();
            act = if !is_last || self.head == HeadActivation::Relu {
                ops::relu_forward(&z)
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let tape = PatchTape { x: x.clone(), a1, bn_cache, b1, r1, a2, flat, pre };
        Ok((act, tape))
    }

    /// Parameter gradients in `param_names` order plus the input gradient.
    pub fn backward(&self, tape: &PatchTape<T>, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let n = tape.x.shape()[0];
        let mut grads_dense: Vec<(Tensor<T>, Tensor<T>)> = Vec::with_capacity(self.dense.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.dense.iter().enumerate().rev() {
            let is_last = i + 1 == self.dense.len();
            if !is_last || self.head == HeadActivation::Relu {
                g = ops::relu_backward(&tape.pre[i], &g);
            }
            let input = if i == 0 { &tape.flat } else { &tape.pre[i - 1] };
            let input = if i == 0 {
                input.clone()
            } else {
                // dense i consumed relu(pre[i-1])
                ops::relu_forward(input)
            };
            let (gx, gw, gb) = layer.backward(&input, &g, MatmulPar::Parallel)?;
            grads_dense.push((gw, gb));
            g = gx;
        }
        grads_dense.reverse();

        let g_r2 = g.reshaped(&[n, self.conv2.out_channels(), self.patch, self.patch])?;
        let g_a2 = ops::relu_backward(&tape.a2, &g_r2);
        let (g_r1, g_conv2_w, g_conv2_b) = ops::conv2d_backward_batch(&tape.r1, &self.conv2.weight, &g_a2)?;
        let g_b1 = ops::relu_backward(&tape.b1, &g_r1);
        let (g_a1, g_gamma, g_beta) = self.bn.backward(&g_b1, &tape.bn_cache);
        let (_, g_conv1_w, g_conv1_b) = ops::conv2d_backward_batch(&tape.x, &self.conv1.weight, &g_a1)?;

        let mut grads = vec![g_conv1_w, g_conv1_b, g_gamma, g_beta, g_conv2_w, g_conv2_b];
        for (gw, gb) in grads_dense {
            grads.push(gw);
            grads.push(gb);
        }
        Ok(grads)
    }

    /// Eval-mode forward of one `[C,40,40]` patch to its center value(s).
    pub fn forward_eval(&self, patch: &Tensor<T>) -> Result<Vec<T>> {
        if patch.shape() != [self.in_channels, self.patch, self.patch] {
            return Err(Error::shape(
                "patch model",
                "input shape",
                format!("{:?}", [self.in_channels, self.patch, self.patch]),
                format!("{:?}", patch.shape()),
            ));
        }
        let a1 = self.conv1.forward(patch, MatmulPar::Serial)?;
        let a1 = a1.reshaped(&[1, self.conv1.out_channels(), self.patch, self.patch])?;
        let b1 = self.bn.forward_eval(&a1)?;
        let r1 = ops::relu_forward(&b1);
        let r1 = r1.reshaped(&[self.conv1.out_channels(), self.patch, self.patch])?;
        let a2 = self.conv2.forward(&r1, MatmulPar::Serial)?;
        let r2 = ops::relu_forward(&a2);
        let mut act = r2.reshaped(&[1, self.dense[0].in_features()])?;
        for (i, layer) in self.dense.iter().enumerate() {
            let z = layer.forward(&act, MatmulPar::Serial)?;
            let is_last = i + 1 == self.dense.len();
            act = if !is_last || self.head == HeadActivation::Relu {
                ops::relu_forward(&z)
            } else {
                z
            };
        }
        Ok(act.data().to_vec())
    }

    /// Eval forward over many patches at once (batch normalization still in
    /// eval mode); used by tests to cross-check the per-patch path.
    pub fn forward_eval_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = self.check_batch(x)?;
        let sample_len = c * self.patch * self.patch;
        let rows: Result<Vec<Vec<T>>> = x
            .data()
            .par_chunks_exact(sample_len)
            .map(|chunk| {
                let patch = Tensor::from_vec(&[c, self.patch, self.patch], chunk.to_vec())?;
                self.forward_eval(&patch)
            })
            .collect();
        let mut out = Tensor::zeros(&[n, self.in_channels]);
        for (dst, row) in out.data_mut().chunks_exact_mut(self.in_channels).zip(rows?) {
            dst.copy_from_slice(&row);
        }
        Ok(out)
    }
}

/// Cached activations of one training forward pass.
pub struct PatchTape<T> {
    pub x: Tensor<T>,
    pub a1: Tensor<T>,
    pub bn_cache: BnCache<T>,
    pub b1: Tensor<T>,
    pub r1: Tensor<T>,
    pub a2: Tensor<T>,
    pub flat: Tensor<T>,
    /// Dense pre-activations, one per layer.
    pub pre: Vec<Tensor<T>>,
}
