//! Depth-2 residual U-Net with a Laplace likelihood head pair: the network
//! emits a correction `mu` added to its input plus a per-pixel scale map `s`.
//! With the `mu` head zero-initialized the untrained model is exactly the
//! identity restorer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::Conv2d;
use crate::nn::ops;
use crate::nn::tensor::{MatmulPar, Scalar, Tensor};
use crate::seeds;

pub const UNET_DEPTH: usize = 2;
pub const UNET_KERNEL: usize = 5;

#[derive(Clone, Debug)]
pub struct ResidualUnet<T = f32> {
    /// Two convolutions per encoder level.
    pub enc: Vec<(Conv2d<T>, Conv2d<T>)>,
    pub mid: (Conv2d<T>, Conv2d<T>),
    /// Two convolutions per decoder level, deepest first.
    pub dec: Vec<(Conv2d<T>, Conv2d<T>)>,
    /// 1x1 linear head for the residual correction; zero-initialized.
    pub head_mu: Conv2d<T>,
    /// 1x1 linear head for the Laplace scale parameter.
    pub head_s: Conv2d<T>,
    pub in_channels: usize,
    pub base_filters: usize,
}

impl<T: Scalar> ResidualUnet<T> {
    /// Channel schedule `base / 2*base` with a `4*base` bottleneck, kernel 5.
    pub fn new(in_channels: usize, base_filters: usize, seed: u64) -> Result<Self> {
        if in_channels != 1 && in_channels != 2 {
            return Err(Error::UnsupportedChannels { got: in_channels });
        }
        if base_filters == 0 {
            return Err(Error::InvalidConfig("base_filters must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, 0x0e7u64]));
        let k = UNET_KERNEL;
        let b = base_filters;
        let enc = vec![
            (Conv2d::new(in_channels, b, k, k, &mut rng), Conv2d::new(b, b, k, k, &mut rng)),
            (Conv2d::new(b, 2 * b, k, k, &mut rng), Conv2d::new(2 * b, 2 * b, k, k, &mut rng)),
        ];
        let mid = (
            Conv2d::new(2 * b, 4 * b, k, k, &mut rng),
            Conv2d::new(4 * b, 4 * b, k, k, &mut rng),
        );
        let dec = vec![
            (Conv2d::new(6 * b, 2 * b, k, k, &mut rng), Conv2d::new(2 * b, 2 * b, k, k, &mut rng)),
            (Conv2d::new(3 * b, b, k, k, &mut rng), Conv2d::new(b, b, k, k, &mut rng)),
        ];
        let head_mu = Conv2d::zeroed(b, in_channels, 1, 1);
        let head_s = Conv2d::zeroed(b, in_channels, 1, 1);
        Ok(ResidualUnet { enc, mid, dec, head_mu, head_s, in_channels, base_filters })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.enc.iter().enumerate() {
            for j in 0..2 {
                names.push(format!("enc{i}.conv{j}.weight"));
                names.push(format!("enc{i}.conv{j}.bias"));
            }
        }
        for j in 0..2 {
            names.push(format!("mid.conv{j}.weight"));
            names.push(format!("mid.conv{j}.bias"));
        }
        for (i, _) in self.dec.iter().enumerate() {
            for j in 0..2 {
                names.push(format!("dec{i}.conv{j}.weight"));
                names.push(format!("dec{i}.conv{j}.bias"));
            }
        }
        for head in ["head_mu", "head_s"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut ps = Vec::new();
        for (a, b) in &self.enc {
            ps.extend([&a.weight, &a.bias, &b.weight, &b.bias]);
        }
        ps.extend([&self.mid.0.weight, &self.mid.0.bias, &self.mid.1.weight, &self.mid.1.bias]);
        for (a, b) in &self.dec {
            ps.extend([&a.weight, &a.bias, &b.weight, &b.bias]);
        }
        ps.extend([&self.head_mu.weight, &self.head_mu.bias, &self.head_s.weight, &self.head_s.bias]);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let ResidualUnet { enc, mid, dec, head_mu, head_s, .. } = self;
        let mut ps: Vec<&mut Tensor<T>> = Vec::new();
        for (a, b) in enc.iter_mut() {
            ps.push(&mut a.weight);
            ps.push(&mut a.bias);
            ps.push(&mut b.weight);
            ps.push(&mut b.bias);
        }
        ps.push(&mut mid.0.weight);
        ps.push(&mut mid.0.bias);
        ps.push(&mut mid.1.weight);
        ps.push(&mut mid.1.bias);
        for (a, b) in dec.iter_mut() {
            ps.push(&mut a.weight);
            ps.push(&mut a.bias);
            ps.push(&mut b.weight);
            ps.push(&mut b.bias);
        }
        ps.push(&mut head_mu.weight);
        ps.push(&mut head_mu.bias);
        ps.push(&mut head_s.weight);
        ps.push(&mut head_s.bias);
        ps
    }

    pub fn param_count(&self) -> u64 {
        self.params().iter().map(|t| t.numel() as u64).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 3 {
            return Err(Error::shape("unet", "input rank", 3, x.shape().len()));
        }
        if x.shape()[0] != self.in_channels {
            return Err(Error::shape("unet", "channels", self.in_channels, x.shape()[0]));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h % 4 != 0 {
            return Err(Error::OddDimension { op: "unet", axis: "height (needs /4)", value: h });
        }
        if w % 4 != 0 {
            return Err(Error::OddDimension { op: "unet", axis: "width (needs /4)", value: w });
        }
        Ok(())
    }

    /// Forward pass of one `[C,H,W]` sample (H, W divisible by 4); returns
    /// the residual prediction `x + mu`, the scale map `s`, and the tape.
    pub fn forward(&self, x: &Tensor<T>, par: MatmulPar) -> Result<(Tensor<T>, Tensor<T>, UnetTape<T>)> {
        self.check_input(x)?;
        let conv = |layer: &Conv2d<T>, input: &Tensor<T>| layer.forward(input, par);

        let e0a = conv(&self.enc[0].0, x)?;
        let e0b = conv(&self.enc[0].1, &ops::relu_forward(&e0a))?;
        let skip0 = ops::relu_forward(&e0b);
        let (p0, arg0) = ops::maxpool2_forward(&skip0)?;

        let e1a = conv(&self.enc[1].0, &p0)?;
        let e1b = conv(&self.enc[1].1, &ops::relu_forward(&e1a))?;
        let skip1 = ops::relu_forward(&e1b);
        let (p1, arg1) = ops::maxpool2_forward(&skip1)?;

        let m0 = conv(&self.mid.0, &p1)?;
        let m1 = conv(&self.mid.1, &ops::relu_forward(&m0))?;

        let u1 = ops::upsample2_forward(&ops::relu_forward(&m1))?;
        let c1 = ops::concat_channels(&u1, &skip1)?;
        let d1a = conv(&self.dec[0].0, &c1)?;
        let d1b = conv(&self.dec[0].1, &ops::relu_forward(&d1a))?;

        let u0 = ops::upsample2_forward(&ops::relu_forward(&d1b))?;
        let c0 = ops::concat_channels(&u0, &skip0)?;
        let d0a = conv(&self.dec[1].0, &c0)?;
        let d0b = conv(&self.dec[1].1, &ops::relu_forward(&d0a))?;
        let feat = ops::relu_forward(&d0b);

        let mu = conv(&self.head_mu, &feat)?;
        let s = conv(&self.head_s, &feat)?;
        let pred = ops::residual_add(x, &mu)?;

        let tape = UnetTape {
            x: x.clone(),
            e0a,
            e0b,
            arg0,
            p0,
            e1a,
            e1b,
            arg1,
            p1,
            m0,
            m1,
            c1,
            d1a,
            d1b,
            c0,
            d0a,
            d0b,
        };
        Ok((pred, s, tape))
    }

    /// Eval-mode prediction for one sample: just the residual output.
    pub fn predict_sample(&self, x: &Tensor<T>, par: MatmulPar) -> Result<Tensor<T>> {
        Ok(self.forward(x, par)?.0)
    }

    /// Parameter gradients in `param_names` order given upstream gradients
    /// for the residual prediction and the scale map.
    pub fn backward(
        &self,
        tape: &UnetTape<T>,
        grad_pred: &Tensor<T>,
        grad_s: &Tensor<T>,
        par: MatmulPar,
    ) -> Result<Vec<Tensor<T>>> {
        let feat = ops::relu_forward(&tape.d0b);
        let (g_feat_mu, g_mu_w, g_mu_b) = self.head_mu.backward(&feat, grad_pred, par)?;
        let (g_feat_s, g_s_w, g_s_b) = self.head_s.backward(&feat, grad_s, par)?;
        let mut g_feat = g_feat_mu;
        g_feat.add_assign(&g_feat_s);

        let g_d0b = ops::relu_backward(&tape.d0b, &g_feat);
        let d0a_act = ops::relu_forward(&tape.d0a);
        let (g_d0a_act, g_dec1_1_w, g_dec1_1_b) = self.dec[1].1.backward(&d0a_act, &g_d0b, par)?;
        let g_d0a = ops::relu_backward(&tape.d0a, &g_d0a_act);
        let (g_c0, g_dec1_0_w, g_dec1_0_b) = self.dec[1].0.backward(&tape.c0, &g_d0a, par)?;
        let u0_channels = 2 * self.base_filters;
        let (g_u0, g_skip0_a) = ops::concat_backward(&g_c0, u0_channels);
        let g_d1b_act = ops::upsample2_backward(&g_u0);
        let g_d1b = ops::relu_backward(&tape.d1b, &g_d1b_act);

        let d1a_act = ops::relu_forward(&tape.d1a);
        let (g_d1a_act, g_dec0_1_w, g_dec0_1_b) = self.dec[0].1.backward(&d1a_act, &g_d1b, par)?;
        let g_d1a = ops::relu_backward(&tape.d1a, &g_d1a_act);
        let (g_c1, g_dec0_0_w, g_dec0_0_b) = self.dec[0].0.backward(&tape.c1, &g_d1a, par)?;
        let u1_channels = 4 * self.base_filters;
        let (g_u1, g_skip1_a) = ops::concat_backward(&g_c1, u1_channels);
        let g_m1_act = ops::upsample2_backward(&g_u1);
        let g_m1 = ops::relu_backward(&tape.m1, &g_m1_act);

        let m0_act = ops::relu_forward(&tape.m0);
        let (g_m0_act, g_mid1_w, g_mid1_b) = self.mid.1.backward(&m0_act, &g_m1, par)?;
        let g_m0 = ops::relu_backward(&tape.m0, &g_m0_act);
        let (g_p1, g_mid0_w, g_mid0_b) = self.mid.0.backward(&tape.p1, &g_m0, par)?;

        // Skip 1 receives gradient both from the decoder concat and the pool.
        let skip1 = ops::relu_forward(&tape.e1b);
        let mut g_skip1 = ops::maxpool2_backward(skip1.shape(), &tape.arg1, &g_p1);
        g_skip1.add_assign(&g_skip1_a);
        let g_e1b = ops::relu_backward(&tape.e1b, &g_skip1);
        let e1a_act = ops::relu_forward(&tape.e1a);
        let (g_e1a_act, g_enc1_1_w, g_enc1_1_b) = self.enc[1].1.backward(&e1a_act, &g_e1b, par)?;
        let g_e1a = ops::relu_backward(&tape.e1a, &g_e1a_act);
        let (g_p0, g_enc1_0_w, g_enc1_0_b) = self.enc[1].0.backward(&tape.p0, &g_e1a, par)?;

        let skip0 = ops::relu_forward(&tape.e0b);
        let mut g_skip0 = ops::maxpool2_backward(skip0.shape(), &tape.arg0, &g_p0);
        g_skip0.add_assign(&g_skip0_a);
        let g_e0b = ops::relu_backward(&tape.e0b, &g_skip0);
        let e0a_act = ops::relu_forward(&tape.e0a);
        let (g_e0a_act, g_enc0_1_w, g_enc0_1_b) = self.enc[0].1.backward(&e0a_act, &g_e0b, par)?;
        let g_e0a = ops::relu_backward(&tape.e0a, &g_e0a_act);
        let (_, g_enc0_0_w, g_enc0_0_b) = self.enc[0].0.backward(&tape.x, &g_e0a, par)?;

        Ok(vec![
            g_enc0_0_w, g_enc0_0_b, g_enc0_1_w, g_enc0_1_b,
            g_enc1_0_w, g_enc1_0_b, g_enc1_1_w, g_enc1_1_b,
            g_mid0_w, g_mid0_b, g_mid1_w, g_mid1_b,
            g_dec0_0_w, g_dec0_0_b, g_dec0_1_w, g_dec0_1_b,
            g_dec1_0_w, g_dec1_0_b, g_dec1_1_w, g_dec1_1_b,
            g_mu_w, g_mu_b, g_s_w, g_s_b,
        ])
    }
}

/// Cached activations of one forward pass.
pub struct UnetTape<T> {
    pub x: Tensor<T>,
    pub e0a: Tensor<T>,
    pub e0b: Tensor<T>,
    pub arg0: Vec<u32>,
    pub p0: Tensor<T>,
    pub e1a: Tensor<T>,
    pub e1b: Tensor<T>,
    pub arg1: Vec<u32>,
    pub p1: Tensor<T>,
    pub m0: Tensor<T>,
    pub m1: Tensor<T>,
    pub c1: Tensor<T>,
    pub d1a: Tensor<T>,
    pub d1b: Tensor<T>,
    pub c0: Tensor<T>,
    pub d0a: Tensor<T>,
    pub d0b: Tensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shapes_match_input() {
        let net: ResidualUnet<f32> = ResidualUnet::new(2, 4, 1).unwrap();
        let x = Tensor::filled(&[2, 16, 12], 0.5);
        let (pred, s, _) = net.forward(&x, MatmulPar::Serial).unwrap();
        assert_eq!(pred.shape(), x.shape());
        assert_eq!(s.shape(), x.shape());
    }

    #[test]
    fn zero_init_mu_head_is_identity() {
        let net: ResidualUnet<f32> = ResidualUnet::new(1, 4, 7).unwrap();
        let mut x = Tensor::zeros(&[1, 8, 8]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (i as f32) * 0.37 - 5.0;
        }
        let (pred, _, _) = net.forward(&x, MatmulPar::Serial).unwrap();
        assert_eq!(pred.data(), x.data());
    }

    #[test]
    fn kernel_is_five_for_all_trunk_convs() {
        let net: ResidualUnet<f32> = ResidualUnet::new(1, 32, 0).unwrap();
        for (a, b) in net.enc.iter().chain(net.dec.iter()) {
            assert_eq!(a.kernel(), (UNET_KERNEL, UNET_KERNEL));
            assert_eq!(b.kernel(), (UNET_KERNEL, UNET_KERNEL));
        }
        assert_eq!(net.mid.0.kernel(), (UNET_KERNEL, UNET_KERNEL));
        assert_eq!(net.mid.1.kernel(), (UNET_KERNEL, UNET_KERNEL));
        assert_eq!(net.head_mu.kernel(), (1, 1));
        // Channel schedule 32/64 with a 128-channel bottleneck.
        assert_eq!(net.enc[0].1.out_channels(), 32);
        assert_eq!(net.enc[1].1.out_channels(), 64);
        assert_eq!(net.mid.1.out_channels(), 128);
    }

    #[test]
    fn rejects_indivisible_dims() {
        let net: ResidualUnet<f32> = ResidualUnet::new(1, 2, 0).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 10, 8]);
        assert!(net.forward(&x, MatmulPar::Serial).is_err());
    }

    #[test]
    fn param_names_align_with_params() {
        let net: ResidualUnet<f32> = ResidualUnet::new(2, 4, 3).unwrap();
        assert_eq!(net.param_names().len(), net.params().len());
        let mut net = net;
        assert_eq!(net.params_mut().len(), 24);
    }
}
