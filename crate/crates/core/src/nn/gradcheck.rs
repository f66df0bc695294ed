//! Finite-difference validation of every analytic backward pass.
//!
//! The checked scalar readout is a weighted sum of the layer outputs with
//! fixed seed-derived weights. A plain unweighted sum would make batch-norm
//! input gradients vanish identically (the normalized outputs always sum to
//! zero), leaving nothing to compare against.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::tensor::{MatmulPar, Tensor};

/// Layer kinds understood by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kh: usize, kw: usize },
    BatchNorm { channels: usize, eps: f64 },
    Dense { d_in: usize, d_out: usize },
    Relu,
    MaxPool2,
    Upsample2,
    Concat { c_a: usize, c_b: usize },
    Flatten,
    ResidualAdd,
}

impl LayerSpec {
    /// Standard input shapes used when the caller does not supply inputs.
    pub fn default_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let shapes: Vec<Vec<usize>> = match self {
            LayerSpec::Conv2d { in_ch, .. } => vec![vec![*in_ch, 8, 8]],
            LayerSpec::BatchNorm { channels, .. } => vec![vec![4, *channels, 3, 3]],
            LayerSpec::Dense { d_in, .. } => vec![vec![3, *d_in]],
            LayerSpec::Relu => vec![vec![2, 5, 5]],
            LayerSpec::MaxPool2 => vec![vec![2, 6, 6]],
            LayerSpec::Upsample2 => vec![vec![2, 3, 3]],
            LayerSpec::Concat { c_a, c_b } => vec![vec![*c_a, 4, 4], vec![*c_b, 4, 4]],
            LayerSpec::Flatten => vec![vec![2, 3, 4]],
            LayerSpec::ResidualAdd => vec![vec![2, 4, 4], vec![2, 4, 4]],
        };
        shapes.iter().map(|s| bounded_random(s, rng)).collect()
    }
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per checked tensor ("input0", parameter names).
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub pass: bool,
    pub h: f64,
    pub tol: f64,
}

/// Random values with magnitude in [0.1, 1]: keeps finite differences away
/// from the relu/maxpool kinks at zero.
fn bounded_random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn max_rel_err(analytic: &Tensor<f64>, numeric: &[f64]) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

struct Harness {
    params: Vec<(String, Tensor<f64>)>,
    #[allow(clippy::type_complexity)]
    forward: Box<dyn Fn(&[Tensor<f64>], &[(String, Tensor<f64>)]) -> Result<Tensor<f64>>>,
    /// Returns (input gradients, parameter gradients) for an upstream grad.
    #[allow(clippy::type_complexity)]
    backward: Box<
        dyn Fn(
            &[Tensor<f64>],
            &[(String, Tensor<f64>)],
            &Tensor<f64>,
        ) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)>,
    >,
}

fn build_harness(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Harness {
    match spec {
        LayerSpec::Conv2d { in_ch, out_ch, kh, kw } => {
            let weight = bounded_random(&[*out_ch, *in_ch, *kh, *kw], rng);
            let bias = bounded_random(&[*out_ch], rng);
            Harness {
                params: vec![("weight".into(), weight), ("bias".into(), bias)],
                forward: Box::new(|ins, ps| {
                    ops::conv2d_forward(&ins[0], &ps[0].1, &ps[1].1, MatmulPar::Serial)
                }),
                backward: Box::new(|ins, ps, g| {
                    let (gx, gw, gb) = ops::conv2d_backward(&ins[0], &ps[0].1, g, MatmulPar::Serial)?;
                    Ok((vec![gx], vec![gw, gb]))
                }),
            }
        }
        LayerSpec::BatchNorm { channels, eps } => {
            let gamma = bounded_random(&[*channels], rng);
            let beta = bounded_random(&[*channels], rng);
            let eps = *eps;
            Harness {
                params: vec![("gamma".into(), gamma), ("beta".into(), beta)],
                forward: Box::new(move |ins, ps| {
                    let mut state = ops::RunningMoments::new(ps[0].1.numel());
                    let (out, _) = ops::batchnorm_forward(
                        &ins[0], &ps[0].1, &ps[1].1, eps, ops::BnMode::Train, &mut state,
                    )?;
                    Ok(out)
                }),
                backward: Box::new(move |ins, ps, g| {
                    let mut state = ops::RunningMoments::new(ps[0].1.numel());
                    let (_, cache) = ops::batchnorm_forward(
                        &ins[0], &ps[0].1, &ps[1].1, eps, ops::BnMode::Train, &mut state,
                    )?;
                    let (gx, gg, gb) = ops::batchnorm_backward(g, &cache.unwrap(), &ps[0].1);
                    Ok((vec![gx], vec![gg, gb]))
                }),
            }
        }
        LayerSpec::Dense { d_in, d_out } => {
            let weight = bounded_random(&[*d_in, *d_out], rng);
            let bias = bounded_random(&[*d_out], rng);
            Harness {
                params: vec![("weight".into(), weight), ("bias".into(), bias)],
                forward: Box::new(|ins, ps| {
                    ops::dense_forward(&ins[0], &ps[0].1, &ps[1].1, MatmulPar::Serial)
                }),
                backward: Box::new(|ins, ps, g| {
                    let (gx, gw, gb) = ops::dense_backward(&ins[0], &ps[0].1, g, MatmulPar::Serial)?;
                    Ok((vec![gx], vec![gw, gb]))
                }),
            }
        }
        LayerSpec::Relu => Harness {
            params: vec![],
            forward: Box::new(|ins, _| Ok(ops::relu_forward(&ins[0]))),
            backward: Box::new(|ins, _, g| Ok((vec![ops::relu_backward(&ins[0], g)], vec![]))),
        },
        LayerSpec::MaxPool2 => Harness {
            params: vec![],
            forward: Box::new(|ins, _| Ok(ops::maxpool2_forward(&ins[0])?.0)),
            backward: Box::new(|ins, _, g| {
                let (_, argmax) = ops::maxpool2_forward(&ins[0])?;
                Ok((vec![ops::maxpool2_backward(ins[0].shape(), &argmax, g)], vec![]))
            }),
        },
        LayerSpec::Upsample2 => Harness {
            params: vec![],
            forward: Box::new(|ins, _| ops::upsample2_forward(&ins[0])),
            backward: Box::new(|_, _, g| Ok((vec![ops::upsample2_backward(g)], vec![]))),
        },
        LayerSpec::Concat { c_a, .. } => {
            let c_a = *c_a;
            Harness {
                params: vec![],
                forward: Box::new(|ins, _| ops::concat_channels(&ins[0], &ins[1])),
                backward: Box::new(move |_, _, g| {
                    let (ga, gb) = ops::concat_backward(g, c_a);
                    Ok((vec![ga, gb], vec![]))
                }),
            }
        }
        LayerSpec::Flatten => Harness {
            params: vec![],
            forward: Box::new(|ins, _| {
                let n = ins[0].numel();
                ins[0].clone().reshaped(&[n])
            }),
            backward: Box::new(|ins, _, g| Ok((vec![g.clone().reshaped(ins[0].shape())?], vec![]))),
        },
        LayerSpec::ResidualAdd => Harness {
            params: vec![],
            forward: Box::new(|ins, _| ops::residual_add(&ins[0], &ins[1])),
            backward: Box::new(|_, _, g| Ok((vec![g.clone(), g.clone()], vec![]))),
        },
    }
}

/// Central-difference check of a layer's parameter and input gradients.
///
/// `seed` fixes the layer parameters and readout weights; pass the inputs to
/// check, or use [`LayerSpec::default_inputs`].
pub fn grad_check(
    spec: &LayerSpec,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harness = build_harness(spec, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = inputs.to_vec();
    let mut params = harness.params.clone();

    let out0 = (harness.forward)(&inputs, &params)?;
    out0.ensure_finite("grad_check forward")?;
    let weights: Vec<f64> = (0..out0.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    let weight_tensor = Tensor::from_vec(out0.shape(), weights.clone())?;

    let loss = |out: &Tensor<f64>| -> f64 {
        out.data().iter().zip(&weights).map(|(&o, &w)| o * w).sum()
    };

    let (grad_inputs, grad_params) = (harness.backward)(&inputs, &params, &weight_tensor)?;

    let mut per_tensor = Vec::new();
    let n_inputs = inputs.len();
    let n_params = params.len();

    // Finite differences over inputs, then parameters; each element is
    // perturbed in place and restored.
    for t in 0..n_inputs + n_params {
        let analytic = if t < n_inputs { &grad_inputs[t] } else { &grad_params[t - n_inputs].clone() };
        let name = if t < n_inputs {
            format!("input{t}")
        } else {
            params[t - n_inputs].0.clone()
        };
        let len = analytic.numel();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let read = |inputs: &[Tensor<f64>], params: &[(String, Tensor<f64>)]| -> Result<f64> {
                Ok(loss(&(harness.forward)(inputs, params)?))
            };
            let orig = if t < n_inputs {
                inputs[t].data()[i]
            } else {
                params[t - n_inputs].1.data()[i]
            };
            let set = |v: f64, inputs: &mut Vec<Tensor<f64>>, params: &mut Vec<(String, Tensor<f64>)>| {
                if t < n_inputs {
                    inputs[t].data_mut()[i] = v;
                } else {
                    params[t - n_inputs].1.data_mut()[i] = v;
                }
            };
            set(orig + h, &mut inputs, &mut params);
            let up = read(&inputs, &params)?;
            set(orig - h, &mut inputs, &mut params);
            let down = read(&inputs, &params)?;
            set(orig, &mut inputs, &mut params);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { context: format!("grad_check fd on {name}") });
            }
            numeric[i] = (up - down) / (2.0 * h);
        }
        per_tensor.push((name, max_rel_err(analytic, &numeric)));
    }

    let max = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err: max,
        pass: max <= tol,
        h,
        tol,
    })
}

/// Runs [`grad_check`] with default inputs for one seed.
pub fn grad_check_default(spec: &LayerSpec, h: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1234);
    let inputs = spec.default_inputs(&mut rng);
    grad_check(spec, &inputs, h, tol, seed)
}
