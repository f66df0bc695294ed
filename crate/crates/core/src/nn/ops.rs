//! Forward and backward kernels for every layer the two models use.
//!
//! Conventions fixed here and relied on everywhere else:
//! - Convolutions use "same" zero padding with stride 1. The window for an
//!   even kernel of size k covers offsets `1-ceil(k/2) ..= k/2` relative to
//!   the output pixel (so a 4x4 kernel spans -1..=+2).
//! - Max-pool gradient routes to the argmax, first index in row-major order
//!   on ties.
//! - All reductions accumulate in a fixed sequential order, so identical
//!   inputs produce bit-identical outputs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul_nn, matmul_nt, matmul_tn, MatmulPar, Scalar, Tensor};

/// First kernel offset relative to the output pixel (`1 - ceil(k/2)`).
#[inline]
pub fn same_pad_lo(k: usize) -> isize {
    1 - ((k + 1) / 2) as isize
}

fn check_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize, what: &'static str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::shape(op, what, rank, t.shape().len()));
    }
    Ok(())
}

/// Lays out every kernel window of `input` as one column per output pixel.
///
/// Output is `(c_in*kh*kw) x (h*w)`, row-major, zero-filled outside the image.
fn im2col<T: Scalar>(input: &Tensor<T>, kh: usize, kw: usize) -> Vec<T> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let lo_y = same_pad_lo(kh);
    let lo_x = same_pad_lo(kw);
    let cols_w = h * w;
    let mut cols = vec![T::zero(); c_in * kh * kw * cols_w];
    let data = input.data();
    for ci in 0..c_in {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &mut cols[((ci * kh + u) * kw + v) * cols_w..][..cols_w];
                for y in 0..h {
                    let iy = y as isize + lo_y + u as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..iy as usize * w + w];
                    let dst_row = &mut row[y * w..y * w + w];
                    // x + lo_x + v must land inside 0..w; the valid span is
                    // contiguous on both sides.
                    let shift = lo_x + v as isize;
                    let x0 = (-shift).max(0) as usize;
                    let x1 = (w as isize - shift).clamp(0, w as isize) as usize;
                    if x0 < x1 {
                        dst_row[x0..x1].copy_from_slice(
                            &src_row[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize],
                        );
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: scatter-adds column gradients back onto the image.
fn col2im<T: Scalar>(grad_cols: &[T], c_in: usize, h: usize, w: usize, kh: usize, kw: usize) -> Tensor<T> {
    let lo_y = same_pad_lo(kh);
    let lo_x = same_pad_lo(kw);
    let cols_w = h * w;
    let mut grad_in = Tensor::zeros(&[c_in, h, w]);
    let data = grad_in.data_mut();
    for ci in 0..c_in {
        let plane = &mut data[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &grad_cols[((ci * kh + u) * kw + v) * cols_w..][..cols_w];
                for y in 0..h {
                    let iy = y as isize + lo_y + u as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let shift = lo_x + v as isize;
                    let x0 = (-shift).max(0) as usize;
                    let x1 = (w as isize - shift).clamp(0, w as isize) as usize;
                    if x0 < x1 {
                        let dst = &mut plane[(iy as usize * w) + (x0 as isize + shift) as usize
                            ..(iy as usize * w) + (x1 as isize + shift) as usize];
                        let src = &row[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn conv_check<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    check_rank("conv2d", input, 3, "input rank")?;
    check_rank("conv2d", kernel, 4, "kernel rank")?;
    check_rank("conv2d", bias, 1, "bias rank")?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kh == 0 || kw == 0 || c_out == 0 {
        return Err(Error::shape("conv2d", "kernel dims", "positive", "zero"));
    }
    if kc != c_in {
        return Err(Error::shape("conv2d", "input channels", kc, c_in));
    }
    if bias.shape()[0] != c_out {
        return Err(Error::shape("conv2d", "bias channels", c_out, bias.shape()[0]));
    }
    Ok((c_in, h, w, c_out, kh, kw))
}

/// Same-padded stride-1 convolution of a `[C_in,H,W]` sample.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    par: MatmulPar,
) -> Result<Tensor<T>> {
    let (c_in, h, w, c_out, kh, kw) = conv_check(input, kernel, bias)?;
    let cols = im2col(input, kh, kw);
    let mut out = Tensor::zeros(&[c_out, h, w]);
    matmul_nn(
        c_out,
        c_in * kh * kw,
        h * w,
        kernel.data(),
        &cols,
        out.data_mut(),
        par,
    );
    let bd = bias.data();
    for (co, row) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let b = bd[co];
        for v in row.iter_mut() {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Input/kernel/bias gradients of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    par: MatmulPar,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_rank("conv2d_backward", grad_out, 3, "grad rank")?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::shape(
            "conv2d_backward",
            "grad shape",
            format!("{:?}", [c_out, h, w]),
            format!("{:?}", grad_out.shape()),
        ));
    }

    let mut grad_bias = Tensor::zeros(&[c_out]);
    for (co, row) in grad_out.data().chunks_exact(h * w).enumerate() {
        let mut acc = T::zero();
        for &g in row {
            acc = acc + g;
        }
        grad_bias.data_mut()[co] = acc;
    }

    let cols = im2col(input, kh, kw);
    let ckk = c_in * kh * kw;
    let mut grad_kernel = Tensor::zeros(&[c_out, c_in, kh, kw]);
    // dK = G (c_out x hw) @ cols^T (hw x ckk)
    matmul_nt(c_out, h * w, ckk, grad_out.data(), &cols, grad_kernel.data_mut(), par);

    // dCols = K^T (ckk x c_out) @ G (c_out x hw)
    let mut grad_cols = vec![T::zero(); ckk * h * w];
    matmul_tn(ckk, c_out, h * w, kernel.data(), grad_out.data(), &mut grad_cols, par);
    let grad_input = col2im(&grad_cols, c_in, h, w, kh, kw);
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Applies [`conv2d_forward`] to each `[C,H,W]` sample of a `[N,C,H,W]` batch.
pub fn conv2d_forward_batch<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    let sample_shape = &input.shape()[1..];
    let c_out = kernel.shape()[0];
    let (h, w) = (sample_shape[1], sample_shape[2]);
    let sample_len: usize = sample_shape.iter().product();
    let out_len = c_out * h * w;
    let mut out = Tensor::zeros(&[n, c_out, h, w]);
    let results: Result<Vec<Tensor<T>>> = input
        .data()
        .par_chunks_exact(sample_len)
        .map(|chunk| {
            let sample = Tensor::from_vec(sample_shape, chunk.to_vec())?;
            conv2d_forward(&sample, kernel, bias, MatmulPar::Serial)
        })
        .collect();
    for (dst, src) in out.data_mut().chunks_exact_mut(out_len).zip(results?) {
        dst.copy_from_slice(src.data());
    }
    Ok(out)
}

/// Per-sample backward pass over a batch; kernel/bias gradients are summed in
/// sample-index order so the result is independent of scheduling.
pub fn conv2d_backward_batch<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let sample_shape = &input.shape()[1..];
    let sample_len: usize = sample_shape.iter().product();
    let out_shape = &grad_out.shape()[1..];
    let out_len: usize = out_shape.iter().product();

    let per_sample: Result<Vec<_>> = input
        .data()
        .par_chunks_exact(sample_len)
        .zip(grad_out.data().par_chunks_exact(out_len))
        .map(|(x, g)| {
            let x = Tensor::from_vec(sample_shape, x.to_vec())?;
            let g = Tensor::from_vec(out_shape, g.to_vec())?;
            conv2d_backward(&x, kernel, &g, MatmulPar::Serial)
        })
        .collect();
    let per_sample = per_sample?;

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_bias = Tensor::zeros(&[kernel.shape()[0]]);
    for (i, (gx, gk, gb)) in per_sample.into_iter().enumerate() {
        grad_input.data_mut()[i * sample_len..(i + 1) * sample_len].copy_from_slice(gx.data());
        grad_kernel.add_assign(&gk);
        grad_bias.add_assign(&gb);
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Train/eval switch for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponentially averaged batch moments (biased variance). Stored at the
/// working precision so checkpointed state round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningMoments<T> {
    pub fn new(channels: usize) -> Self {
        RunningMoments {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }
}

/// Intermediates cached by a train-mode forward pass for the backward pass.
#[derive(Debug)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

/// Normalizes per channel (axis 1) of an `[N,C,...]` batch.
///
/// Train mode uses batch moments and folds them into `state` with momentum
/// 0.9 (the first call seeds the running moments with the batch moments);
/// eval mode uses the running moments and errors if none were ever recorded.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mode: BnMode,
    state: &mut RunningMoments<T>,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    if x.shape().len() < 2 {
        return Err(Error::shape("batchnorm", "input rank", ">=2", x.shape().len()));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batchnorm", "channels", c, gamma.shape()[0]));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("batchnorm eps must be > 0, got {eps}")));
    }
    let spatial: usize = x.shape()[2..].iter().product();
    let per_channel = n * spatial;

    let (mean, var) = match mode {
        BnMode::Train => {
            if n < 1 {
                return Err(Error::shape("batchnorm", "batch size", ">=1", n));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let chunk = &x.data()[(ni * c + ci) * spatial..][..spatial];
                    let mut acc = 0.0f64;
                    for &v in chunk {
                        acc += v.to_f64();
                    }
                    mean[ci] += acc;
                }
            }
            for m in mean.iter_mut() {
                *m /= per_channel as f64;
            }
            for ni in 0..n {
                for ci in 0..c {
                    let chunk = &x.data()[(ni * c + ci) * spatial..][..spatial];
                    let mut acc = 0.0f64;
                    for &v in chunk {
                        let d = v.to_f64() - mean[ci];
                        acc += d * d;
                    }
                    var[ci] += acc;
                }
            }
            for v in var.iter_mut() {
                *v /= per_channel as f64;
            }
            if state.initialized {
                for ci in 0..c {
                    state.mean[ci] =
                        T::from_f64(0.9 * state.mean[ci].to_f64() + 0.1 * mean[ci]);
                    state.var[ci] = T::from_f64(0.9 * state.var[ci].to_f64() + 0.1 * var[ci]);
                }
            } else {
                for ci in 0..c {
                    state.mean[ci] = T::from_f64(mean[ci]);
                    state.var[ci] = T::from_f64(var[ci]);
                }
                state.initialized = true;
            }
            (mean, var)
        }
        BnMode::Eval => {
            if !state.initialized {
                return Err(Error::UninitializedRunningMoments);
            }
            (
                state.mean.iter().map(|&v| v.to_f64()).collect(),
                state.var.iter().map(|&v| v.to_f64()).collect(),
            )
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let g = gamma.data()[ci].to_f64();
            let b = beta.data()[ci].to_f64();
            let (m, istd) = (mean[ci], inv_std[ci]);
            let src = &x.data()[base..base + spatial];
            for ((xv, xh), o) in src
                .iter()
                .zip(&mut x_hat.data_mut()[base..base + spatial])
                .zip(&mut out.data_mut()[base..base + spatial])
            {
                let normalized = (xv.to_f64() - m) * istd;
                *xh = T::from_f64(normalized);
                *o = T::from_f64(g * normalized + b);
            }
        }
    }
    let cache = match mode {
        BnMode::Train => Some(BnCache { x_hat, inv_std }),
        BnMode::Eval => None,
    };
    Ok((out, cache))
}

/// Backward pass for train-mode batch normalization.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = grad_out.shape();
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let m = (n * spatial) as f64;

    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    let mut sum_dxhat = vec![0.0f64; c];
    let mut sum_dxhat_xhat = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let g = gamma.data()[ci].to_f64();
            let mut dg = 0.0f64;
            let mut db = 0.0f64;
            let mut dxh = 0.0f64;
            let mut dxh_xh = 0.0f64;
            for (go, xh) in grad_out.data()[base..base + spatial]
                .iter()
                .zip(&cache.x_hat.data()[base..base + spatial])
            {
                let (go, xh) = (go.to_f64(), xh.to_f64());
                dg += go * xh;
                db += go;
                dxh += go * g;
                dxh_xh += go * g * xh;
            }
            sum_dxhat[ci] += dxh;
            sum_dxhat_xhat[ci] += dxh_xh;
            grad_gamma.data_mut()[ci] = grad_gamma.data_mut()[ci] + T::from_f64(dg);
            grad_beta.data_mut()[ci] = grad_beta.data_mut()[ci] + T::from_f64(db);
        }
    }

    let mut grad_x = Tensor::zeros(shape);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let g = gamma.data()[ci].to_f64();
            let k = cache.inv_std[ci] / m;
            let (s_dxh, s_dxh_xh) = (sum_dxhat[ci], sum_dxhat_xhat[ci]);
            for ((go, xh), gx) in grad_out.data()[base..base + spatial]
                .iter()
                .zip(&cache.x_hat.data()[base..base + spatial])
                .zip(&mut grad_x.data_mut()[base..base + spatial])
            {
                let dxhat = go.to_f64() * g;
                *gx = T::from_f64(k * (m * dxhat - s_dxh - xh.to_f64() * s_dxh_xh));
            }
        }
    }
    (grad_x, grad_gamma, grad_beta)
}

/// `y = x W + b` for `x: [N,D_in]`, `W: [D_in,D_out]`, `b: [D_out]`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    par: MatmulPar,
) -> Result<Tensor<T>> {
    check_rank("dense", x, 2, "input rank")?;
    check_rank("dense", w, 2, "weight rank")?;
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let (wd_in, d_out) = (w.shape()[0], w.shape()[1]);
    if d_in != wd_in {
        return Err(Error::shape("dense", "inner dimension", wd_in, d_in));
    }
    if b.shape() != [d_out] {
        return Err(Error::shape("dense", "bias size", d_out, b.shape()[0]));
    }
    let mut out = Tensor::zeros(&[n, d_out]);
    matmul_nn(n, d_in, d_out, x.data(), w.data(), out.data_mut(), par);
    for row in out.data_mut().chunks_exact_mut(d_out) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v = *v + bv;
        }
    }
    Ok(out)
}

/// Input/weight/bias gradients of [`dense_forward`].
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    par: MatmulPar,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let (_, d_out) = (w.shape()[0], w.shape()[1]);
    if grad_out.shape() != [n, d_out] {
        return Err(Error::shape(
            "dense_backward",
            "grad shape",
            format!("{:?}", [n, d_out]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grad_x = Tensor::zeros(&[n, d_in]);
    matmul_nt(n, d_out, d_in, grad_out.data(), w.data(), grad_x.data_mut(), par);
    let mut grad_w = Tensor::zeros(&[d_in, d_out]);
    matmul_tn(d_in, n, d_out, x.data(), grad_out.data(), grad_w.data_mut(), par);
    let mut grad_b = Tensor::zeros(&[d_out]);
    for row in grad_out.data().chunks_exact(d_out) {
        for (acc, &g) in grad_b.data_mut().iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Gradient mask: passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(x.shape(), grad_out.shape());
    let mut grad = grad_out.clone();
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    grad
}

/// 2x2 max pooling of a `[C,H,W]` sample; also returns flat argmax indices.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    check_rank("maxpool2", x, 3, "input rank")?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 {
        return Err(Error::OddDimension { op: "maxpool2", axis: "height", value: h });
    }
    if w % 2 != 0 {
        return Err(Error::OddDimension { op: "maxpool2", axis: "width", value: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let iy = oy * 2 + dy;
                        let ix = ox * 2 + dx;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = ci * h * w + iy * w + ix;
                        }
                    }
                }
                out.data_mut()[(ci * oh + oy) * ow + ox] = best;
                argmax[(ci * oh + oy) * ow + ox] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each pooled gradient back to its argmax location.
pub fn maxpool2_backward<T: Scalar>(
    in_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut grad_in = Tensor::zeros(in_shape);
    for (i, &g) in grad_out.data().iter().enumerate() {
        let idx = argmax[i] as usize;
        grad_in.data_mut()[idx] = grad_in.data_mut()[idx] + g;
    }
    grad_in
}

/// Nearest-neighbor 2x upsampling of a `[C,H,W]` sample.
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank("upsample2", x, 3, "input rank")?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ci in 0..c {
        let src = &x.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out.data_mut()[ci * 4 * h * w..(ci + 1) * 4 * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let base = (2 * y) * (2 * w) + 2 * x_;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Sums each 2x2 block of the upstream gradient back onto its source pixel.
pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut grad_in = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = &grad_out.data()[ci * h2 * w2..(ci + 1) * h2 * w2];
        let dst = &mut grad_in.data_mut()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let base = (2 * y) * w2 + 2 * x_;
                dst[y * w + x_] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    grad_in
}

/// Stacks `a`'s channels before `b`'s; spatial dimensions must agree.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank("concat", a, 3, "lhs rank")?;
    check_rank("concat", b, 3, "rhs rank")?;
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (cb, hb, wb) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if h != hb {
        return Err(Error::shape("concat", "height", h, hb));
    }
    if w != wb {
        return Err(Error::shape("concat", "width", w, wb));
    }
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

/// Splits the upstream gradient of a concat at channel `c_a`.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, c_a: usize) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let split = c_a * h * w;
    let grad_a = Tensor::from_vec(&[c_a, h, w], grad_out.data()[..split].to_vec()).unwrap();
    let grad_b = Tensor::from_vec(&[c - c_a, h, w], grad_out.data()[split..].to_vec()).unwrap();
    (grad_a, grad_b)
}

/// Elementwise sum of two same-shape tensors (the residual skip).
pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "residual_add",
            "shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct quadruple-loop convolution used as the independent oracle.
    fn conv_oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let lo_y = same_pad_lo(kh);
        let lo_x = same_pad_lo(kw);
        let mut out = Tensor::zeros(&[c_out, h, w]);
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = y as isize + lo_y + u as isize;
                                let ix = x as isize + lo_x + v as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at(&[ci, iy as usize, ix as usize])
                                    * kernel.at(&[co, ci, u, v]);
                            }
                        }
                    }
                    out.data_mut()[(co * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_hand_values() {
        // 3x3 ones kernel over a 3x3 ones image: center 9, edge-middle 6, corner 4.
        let input = Tensor::<f64>::filled(&[1, 3, 3], 1.0);
        let kernel = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::<f64>::zeros(&[1]);
        let out = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap();
        assert_eq!(out.at(&[0, 1, 1]), 9.0);
        assert_eq!(out.at(&[0, 0, 1]), 6.0);
        assert_eq!(out.at(&[0, 1, 0]), 6.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
        assert_eq!(out.at(&[0, 2, 2]), 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut r = rng(1);
        let input = random_tensor(&[1, 5, 4], &mut r);
        let kernel = Tensor::<f64>::filled(&[1, 1, 1, 1], 1.0);
        let bias = Tensor::<f64>::zeros(&[1]);
        let out = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_shape_contract_64_filters() {
        // 2x40x40 input, 64 filters of 4x4 -> 64x40x40 under same padding.
        let mut r = rng(2);
        let input = random_tensor(&[2, 40, 40], &mut r);
        let kernel = random_tensor(&[64, 2, 4, 4], &mut r);
        let bias = random_tensor(&[64], &mut r);
        let out = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap();
        assert_eq!(out.shape(), &[64, 40, 40]);
    }

    #[test]
    fn conv_same_padding_preserves_spatial_dims() {
        for &k in &[1usize, 3, 4, 5] {
            let mut r = rng(k as u64);
            let input = random_tensor(&[2, 10, 7], &mut r);
            let kernel = random_tensor(&[3, 2, k, k], &mut r);
            let bias = random_tensor(&[3], &mut r);
            let out = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap();
            assert_eq!(out.shape(), &[3, 10, 7], "kernel {k}");
        }
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let c_in = r.random_range(1..3);
            let c_out = r.random_range(1..4);
            let k = *[1usize, 3, 4, 5].get(r.random_range(0..4)).unwrap();
            let h = r.random_range(3..9);
            let w = r.random_range(3..9);
            let input = random_tensor(&[c_in, h, w], &mut r);
            let kernel = random_tensor(&[c_out, c_in, k, k], &mut r);
            let bias = random_tensor(&[c_out], &mut r);
            let got = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap();
            let want = conv_oracle(&input, &kernel, &bias);
            for (g, w_) in got.data().iter().zip(want.data()) {
                assert!((g - w_).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn conv_shape_mismatch_names_axis() {
        let input = Tensor::<f64>::zeros(&[2, 4, 4]);
        let kernel = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let bias = Tensor::<f64>::zeros(&[1]);
        let err = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn batchnorm_zero_variance_outputs_beta() {
        let x = Tensor::<f64>::filled(&[4, 1, 2], 3.0);
        let gamma = Tensor::<f64>::filled(&[1], 1.0);
        let beta = Tensor::<f64>::filled(&[1], 0.5);
        let mut state = RunningMoments::new(1);
        let (out, _) = batchnorm_forward(&x, &gamma, &beta, 1e-5, BnMode::Train, &mut state).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() <= 1e-3);
        }
    }

    #[test]
    fn batchnorm_two_point_batch() {
        // Values {0,2}: mean 1, biased variance 1 -> normalized {-1,+1}.
        let x = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]).unwrap();
        let gamma = Tensor::<f64>::filled(&[1], 1.0);
        let beta = Tensor::<f64>::zeros(&[1]);
        let mut state = RunningMoments::new(1);
        let (out, _) = batchnorm_forward(&x, &gamma, &beta, 1e-12, BnMode::Train, &mut state).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-6);
        assert!((out.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_idempotent_on_normalized_input() {
        // A batch that is already zero-mean unit-variance passes through.
        let vals = vec![-1.5, -0.5, 0.5, 1.5];
        let mean = 0.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let scaled: Vec<f64> = vals.iter().map(|v| v / var.sqrt()).collect();
        let x = Tensor::from_vec(&[4, 1], scaled).unwrap();
        let gamma = Tensor::<f64>::filled(&[1], 1.0);
        let beta = Tensor::<f64>::zeros(&[1]);
        let mut state = RunningMoments::new(1);
        let (out, _) = batchnorm_forward(&x, &gamma, &beta, 1e-8, BnMode::Train, &mut state).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i).abs() <= 1e-3);
        }
    }

    #[test]
    fn batchnorm_eval_before_train_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let gamma = Tensor::<f64>::filled(&[2], 1.0);
        let beta = Tensor::<f64>::zeros(&[2]);
        let mut state = RunningMoments::new(2);
        let err = batchnorm_forward(&x, &gamma, &beta, 1e-5, BnMode::Eval, &mut state).unwrap_err();
        assert!(matches!(err, Error::UninitializedRunningMoments));
    }

    #[test]
    fn batchnorm_eval_uses_running_moments() {
        let mut r = rng(7);
        let gamma = Tensor::<f64>::filled(&[2], 1.0);
        let beta = Tensor::<f64>::zeros(&[2]);
        let mut state = RunningMoments::new(2);
        let x = random_tensor(&[8, 2, 3], &mut r);
        batchnorm_forward(&x, &gamma, &beta, 1e-5, BnMode::Train, &mut state).unwrap();
        // Eval on a single sample must not depend on that sample's own moments.
        let probe = random_tensor(&[1, 2, 3], &mut r);
        let (a, cache) = batchnorm_forward(&probe, &gamma, &beta, 1e-5, BnMode::Eval, &mut state).unwrap();
        assert!(cache.is_none());
        let (b, _) = batchnorm_forward(&probe, &gamma, &beta, 1e-5, BnMode::Eval, &mut state).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b0 = Tensor::<f64>::zeros(&[2]);
        let y = dense_forward(&x, &w, &b0, MatmulPar::Serial).unwrap();
        assert_eq!(y.data(), x.data());
        let b1 = Tensor::<f64>::filled(&[2], 1.0);
        let y = dense_forward(&x, &w, &b1, MatmulPar::Serial).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_dimension_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(dense_forward(&x, &w, &b, MatmulPar::Serial).is_err());
    }

    #[test]
    fn relu_basics() {
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        let y = Tensor::from_vec(&[3], vec![0.0, 1.0, 5.0]).unwrap();
        assert_eq!(relu_forward(&y).data(), y.data());
    }

    #[test]
    fn relu_gradient_mask() {
        let x = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::filled(&[2], 1.0);
        let gx = relu_backward(&x, &g);
        assert_eq!(gx.data(), &[1.0, 0.0]);
    }

    #[test]
    fn maxpool_and_upsample_basics() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);

        let s = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        let up = upsample2_forward(&s).unwrap();
        assert_eq!(up.data(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn maxpool_then_upsample_fixes_constants() {
        let x = Tensor::<f64>::filled(&[2, 4, 4], 1.25);
        let (pooled, _) = maxpool2_forward(&x).unwrap();
        let up = upsample2_forward(&pooled).unwrap();
        assert_eq!(up.data(), x.data());
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4]);
        assert!(matches!(maxpool2_forward(&x), Err(Error::OddDimension { .. })));
    }

    #[test]
    fn maxpool_tie_breaks_first_row_major() {
        let x = Tensor::<f64>::filled(&[1, 2, 2], 7.0);
        let (_, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn concat_basics() {
        let mut r = rng(3);
        let a = random_tensor(&[1, 2, 2], &mut r);
        let b = random_tensor(&[1, 2, 2], &mut r);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(&c.data()[..4], a.data());
        assert_eq!(&c.data()[4..], b.data());

        let bad = Tensor::<f64>::zeros(&[1, 3, 2]);
        assert!(concat_channels(&a, &bad).is_err());
    }

    #[test]
    fn forward_passes_are_pure() {
        // Identical inputs give bit-identical outputs on repeated calls.
        let mut r = rng(21);
        let input = random_tensor(&[2, 6, 6], &mut r);
        let kernel = random_tensor(&[3, 2, 4, 4], &mut r);
        let bias = random_tensor(&[3], &mut r);
        let a = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap();
        let b = conv2d_forward(&input, &kernel, &bias, MatmulPar::Serial).unwrap();
        assert_eq!(a.data(), b.data());
        let (p1, _) = maxpool2_forward(&input).unwrap();
        let (p2, _) = maxpool2_forward(&input).unwrap();
        assert_eq!(p1.data(), p2.data());
        assert_eq!(relu_forward(&input).data(), relu_forward(&input).data());
        assert_eq!(
            upsample2_forward(&input).unwrap().data(),
            upsample2_forward(&input).unwrap().data()
        );
    }

    #[test]
    fn conv_batch_matches_per_sample() {
        let mut r = rng(11);
        let kernel = random_tensor(&[3, 2, 3, 3], &mut r);
        let bias = random_tensor(&[3], &mut r);
        let batch = random_tensor(&[4, 2, 6, 6], &mut r);
        let out = conv2d_forward_batch(&batch, &kernel, &bias).unwrap();
        for i in 0..4 {
            let sample =
                Tensor::from_vec(&[2, 6, 6], batch.data()[i * 72..(i + 1) * 72].to_vec()).unwrap();
            let want = conv2d_forward(&sample, &kernel, &bias, MatmulPar::Serial).unwrap();
            assert_eq!(&out.data()[i * 108..(i + 1) * 108], want.data());
        }
    }
}
