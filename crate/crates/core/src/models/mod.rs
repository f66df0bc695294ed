//! The two restoration architectures, whole-image prediction, parameter
//! counting, and checkpoint serialization.

pub mod checkpoint;
pub mod patch;
pub mod unet;

use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use patch::{HeadActivation, PatchRegressor};
pub use unet::ResidualUnet;

use crate::data::{self, NormalizationParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::gradcheck::LayerSpec;
use crate::nn::tensor::{MatmulPar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchId {
    Patches,
    Unet,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Patches => "patches",
            ArchId::Unet => "unet",
        }
    }
}

/// Source/target intensity windows learned at training time; predictions
/// normalize inputs with the source window and map outputs back through the
/// target window.
#[derive(Clone, Debug, PartialEq)]
pub struct NormPair {
    pub source: NormalizationParams,
    pub target: NormalizationParams,
}

#[derive(Clone, Debug)]
pub enum Net {
    Patches(PatchRegressor<f32>),
    Unet(ResidualUnet<f32>),
}

/// A trained or trainable model: the network plus the normalization attached
/// during training (absent on freshly built models, which then operate on
/// raw intensities).
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Net,
    pub norm: Option<NormPair>,
}

impl Model {
    pub fn arch(&self) -> ArchId {
        match &self.net {
            Net::Patches(_) => ArchId::Patches,
            Net::Unet(_) => ArchId::Unet,
        }
    }

    pub fn in_channels(&self) -> usize {
        match &self.net {
            Net::Patches(m) => m.in_channels,
            Net::Unet(m) => m.in_channels,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match &self.net {
            Net::Patches(m) => m.param_names(),
            Net::Unet(m) => m.param_names(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        match &self.net {
            Net::Patches(m) => m.params(),
            Net::Unet(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        match &mut self.net {
            Net::Patches(m) => m.params_mut(),
            Net::Unet(m) => m.params_mut(),
        }
    }

    /// Ordered layer kinds of the architecture, mirrored by `param_names`.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        match &self.net {
            Net::Patches(m) => {
                let mut specs = vec![
                    LayerSpec::Conv2d {
                        in_ch: m.in_channels,
                        out_ch: m.conv1.out_channels(),
                        kh: 4,
                        kw: 4,
                    },
                    LayerSpec::BatchNorm { channels: m.bn.channels(), eps: m.bn.eps },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        in_ch: m.conv1.out_channels(),
                        out_ch: m.conv2.out_channels(),
                        kh: 3,
                        kw: 3,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                ];
                for d in &m.dense {
                    specs.push(LayerSpec::Dense { d_in: d.in_features(), d_out: d.out_features() });
                    specs.push(LayerSpec::Relu);
                }
                if m.head == HeadActivation::Linear {
                    specs.pop();
                }
                specs
            }
            Net::Unet(m) => {
                let k = unet::UNET_KERNEL;
                let mut specs = Vec::new();
                for (a, b) in &m.enc {
                    specs.push(LayerSpec::Conv2d { in_ch: a.in_channels(), out_ch: a.out_channels(), kh: k, kw: k });
                    specs.push(LayerSpec::Relu);
                    specs.push(LayerSpec::Conv2d { in_ch: b.in_channels(), out_ch: b.out_channels(), kh: k, kw: k });
                    specs.push(LayerSpec::Relu);
                    specs.push(LayerSpec::MaxPool2);
                }
                for c in [&m.mid.0, &m.mid.1] {
                    specs.push(LayerSpec::Conv2d { in_ch: c.in_channels(), out_ch: c.out_channels(), kh: k, kw: k });
                    specs.push(LayerSpec::Relu);
                }
                for (a, b) in &m.dec {
                    specs.push(LayerSpec::Upsample2);
                    specs.push(LayerSpec::Concat {
                        c_a: a.in_channels() - a.out_channels(),
                        c_b: a.out_channels(),
                    });
                    specs.push(LayerSpec::Conv2d { in_ch: a.in_channels(), out_ch: a.out_channels(), kh: k, kw: k });
                    specs.push(LayerSpec::Relu);
                    specs.push(LayerSpec::Conv2d { in_ch: b.in_channels(), out_ch: b.out_channels(), kh: k, kw: k });
                    specs.push(LayerSpec::Relu);
                }
                specs.push(LayerSpec::Conv2d { in_ch: m.base_filters, out_ch: m.in_channels, kh: 1, kw: 1 });
                specs.push(LayerSpec::Conv2d { in_ch: m.base_filters, out_ch: m.in_channels, kh: 1, kw: 1 });
                specs.push(LayerSpec::ResidualAdd);
                specs
            }
        }
    }

    /// Checks parameter-name uniqueness and name/tensor alignment.
    pub fn validate(&self) -> Result<()> {
        let names = self.param_names();
        let params = self.params();
        if names.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "model has {} parameter names but {} tensors",
                names.len(),
                params.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::InvalidConfig(format!("duplicate parameter name {n}")));
            }
        }
        Ok(())
    }
}

/// Builds the published patch-regression architecture.
pub fn build_patch_regressor(in_channels: usize, head: HeadActivation, seed: u64) -> Result<Model> {
    Ok(Model { net: Net::Patches(PatchRegressor::new(in_channels, head, seed)?), norm: None })
}

/// Builds the depth-2 residual U-Net (`base_filters` defaults to 32 at the
/// CLI level).
pub fn build_residual_unet(in_channels: usize, base_filters: usize, seed: u64) -> Result<Model> {
    Ok(Model { net: Net::Unet(ResidualUnet::new(in_channels, base_filters, seed)?), norm: None })
}

/// Total element count of all trainable parameter tensors (batch-norm
/// gamma/beta included, running moments excluded).
pub fn count_params(model: &Model) -> u64 {
    model.params().iter().map(|t| t.numel() as u64).sum()
}

fn normalized_input(model: &Model, image: &Image) -> Result<Tensor<f32>> {
    let img = match &model.norm {
        Some(norm) => data::normalize(image, &norm.source)?,
        None => image.clone(),
    };
    Ok(data::image_to_tensor(&img))
}

fn finalize_output(model: &Model, pred: Tensor<f32>) -> Result<Image> {
    let img = data::tensor_to_image(&pred)?;
    match &model.norm {
        Some(norm) => data::denormalize(&img, &norm.target),
        None => Ok(img),
    }
}

fn patch_net(model: &Model) -> Result<&PatchRegressor<f32>> {
    match &model.net {
        Net::Patches(m) => Ok(m),
        Net::Unet(_) => Err(Error::ArchMismatch { found: "unet", expected: "patches" }),
    }
}

fn unet_net(model: &Model) -> Result<&ResidualUnet<f32>> {
    match &model.net {
        Net::Unet(m) => Ok(m),
        Net::Patches(_) => Err(Error::ArchMismatch { found: "patches", expected: "unet" }),
    }
}

fn check_image_channels(model: &Model, image: &Image) -> Result<()> {
    if image.channels() != model.in_channels() {
        return Err(Error::shape("predict", "channels", model.in_channels(), image.channels()));
    }
    Ok(())
}

fn predict_patch_rows(
    net: &PatchRegressor<f32>,
    src: &Tensor<f32>,
    rows: impl Iterator<Item = usize>,
) -> Result<Vec<Vec<f32>>> {
    let (c, _h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let patch_len = c * data::PATCH * data::PATCH;
    rows.map(|row| {
        let mut buf = vec![0.0f32; patch_len];
        let mut out_row = vec![0.0f32; w * c];
        for col in 0..w {
            data::copy_patch_at(src, row, col, &mut buf);
            let patch = Tensor::from_vec(&[c, data::PATCH, data::PATCH], buf.clone())?;
            let values = net.forward_eval(&patch)?;
            for ci in 0..c {
                out_row[ci * w + col] = values[ci];
            }
        }
        Ok(out_row)
    })
    .collect()
}

fn assemble_rows(rows: Vec<Vec<f32>>, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[c, h, w]);
    for (y, row) in rows.into_iter().enumerate() {
        for ci in 0..c {
            out.data_mut()[(ci * h + y) * w..(ci * h + y) * w + w]
                .copy_from_slice(&row[ci * w..(ci + 1) * w]);
        }
    }
    out
}

/// Restores an image by running the patch network once per pixel. Rows fan
/// out over threads; each pixel's computation is identical to the reference
/// loop, so results are bit-identical to it.
pub fn predict_patch_image(model: &Model, image: &Image) -> Result<Image> {
    let net = patch_net(model)?;
    check_image_channels(model, image)?;
    let src = normalized_input(model, image)?;
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let rows: Result<Vec<Vec<Vec<f32>>>> = (0..h)
        .into_par_iter()
        .map(|row| predict_patch_rows(net, &src, std::iter::once(row)))
        .collect();
    let rows: Vec<Vec<f32>> = rows?.into_iter().flatten().collect();
    finalize_output(model, assemble_rows(rows, c, h, w))
}

/// Sequential per-pixel reference predictor: loop pixels, build the patch,
/// run the forward pass.
pub fn predict_patch_image_reference(model: &Model, image: &Image) -> Result<Image> {
    let net = patch_net(model)?;
    check_image_channels(model, image)?;
    let src = normalized_input(model, image)?;
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let rows = predict_patch_rows(net, &src, 0..h)?;
    finalize_output(model, assemble_rows(rows, c, h, w))
}

/// Tile origins along one axis for tiled prediction: stride `tile - overlap`,
/// last origin clamped so every tile is in bounds.
pub fn tile_origins(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    assert!(tile <= len, "caller pads images smaller than the tile");
    let stride = tile - overlap;
    let mut origins = Vec::new();
    let mut origin = 0usize;
    loop {
        if origin + tile >= len {
            origins.push(len - tile);
            break;
        }
        origins.push(origin);
        origin += stride;
    }
    origins
}

/// Ownership ranges per tile along one axis: interior boundaries sit at the
/// midpoint of each overlap, edge tiles keep their outer margins.
fn owned_ranges(origins: &[usize], tile: usize, len: usize) -> Vec<(usize, usize)> {
    let k = origins.len();
    (0..k)
        .map(|i| {
            let start = if i == 0 { 0 } else { (origins[i - 1] + tile + origins[i]) / 2 };
            let end = if i + 1 == k { len } else { (origins[i] + tile + origins[i + 1]) / 2 };
            (start, end)
        })
        .collect()
}

/// Restores an image with the residual U-Net by tiling, predicting each tile,
/// and stitching the tiles' central regions.
pub fn predict_unet(model: &Model, image: &Image, tile: usize, overlap: usize) -> Result<Image> {
    let net = unet_net(model)?;
    check_image_channels(model, image)?;
    if tile == 0 || tile % 4 != 0 {
        return Err(Error::InvalidConfig(format!("tile must be positive and divisible by 4, got {tile}")));
    }
    if overlap % 2 != 0 || overlap >= tile {
        return Err(Error::InvalidConfig(format!("overlap must be even and < tile, got {overlap}")));
    }
    let src = normalized_input(model, image)?;
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let padded = data::pad_reflect(&src, tile, tile);
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);

    let ys = tile_origins(ph, tile, overlap);
    let xs = tile_origins(pw, tile, overlap);
    let own_y = owned_ranges(&ys, tile, ph);
    let own_x = owned_ranges(&xs, tile, pw);

    let mut jobs = Vec::new();
    for (yi, &y0) in ys.iter().enumerate() {
        for (xi, &x0) in xs.iter().enumerate() {
            jobs.push((yi, xi, y0, x0));
        }
    }
    let par = if jobs.len() == 1 { MatmulPar::Parallel } else { MatmulPar::Serial };

    let tiles: Result<Vec<Tensor<f32>>> = jobs
        .par_iter()
        .map(|&(_, _, y0, x0)| {
            let mut t = Tensor::zeros(&[c, tile, tile]);
            for ci in 0..c {
                for y in 0..tile {
                    let src_off = (ci * ph + y0 + y) * pw + x0;
                    let dst_off = (ci * tile + y) * tile;
                    t.data_mut()[dst_off..dst_off + tile]
                        .copy_from_slice(&padded.data()[src_off..src_off + tile]);
                }
            }
            net.predict_sample(&t, par)
        })
        .collect();
    let tiles = tiles?;

    let mut stitched = Tensor::zeros(&[c, ph, pw]);
    for (job, pred) in jobs.iter().zip(&tiles) {
        let &(yi, xi, y0, x0) = job;
        let (oy0, oy1) = own_y[yi];
        let (ox0, ox1) = own_x[xi];
        for ci in 0..c {
            for y in oy0..oy1 {
                let src_off = (ci * tile + (y - y0)) * tile + (ox0 - x0);
                let dst_off = (ci * ph + y) * pw + ox0;
                stitched.data_mut()[dst_off..dst_off + (ox1 - ox0)]
                    .copy_from_slice(&pred.data()[src_off..src_off + (ox1 - ox0)]);
            }
        }
    }

    // Crop away any reflect padding.
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            let src_off = (ci * ph + y) * pw;
            let dst_off = (ci * h + y) * w;
            out.data_mut()[dst_off..dst_off + w].copy_from_slice(&stitched.data()[src_off..src_off + w]);
        }
    }
    finalize_output(model, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn ramp_image(w: usize, h: usize, c: usize) -> Image {
        let planes = (0..c)
            .map(|ci| (0..w * h).map(|i| (i as f32 * 0.13 + ci as f32).sin() * 50.0 + 60.0).collect())
            .collect();
        Image::from_f32_planes(w, h, planes).unwrap()
    }

    #[test]
    fn tile_origins_512_gives_5x5_grid() {
        let o = tile_origins(512, 128, 16);
        assert_eq!(o, vec![0, 112, 224, 336, 384]);
        assert_eq!(o.len(), 5);
        assert_eq!(tile_origins(128, 128, 16), vec![0]);
    }

    #[test]
    fn owned_ranges_partition_axis() {
        for len in [128usize, 200, 240, 512, 513, 700] {
            let origins = tile_origins(len, 128, 16);
            let own = owned_ranges(&origins, 128, len);
            assert_eq!(own[0].0, 0);
            assert_eq!(own.last().unwrap().1, len);
            for w in own.windows(2) {
                assert_eq!(w[0].1, w[1].0, "len {len}");
            }
            for (i, &(s, e)) in own.iter().enumerate() {
                assert!(s >= origins[i] && e <= origins[i] + 128, "ownership inside tile, len {len}");
            }
        }
    }

    #[test]
    fn identity_unet_survives_tiling_bit_exactly() {
        let model = build_residual_unet(1, 4, 3).unwrap();
        for (w, h) in [(128, 128), (200, 164), (48, 80)] {
            let img = ramp_image(w, h, 1);
            let out = predict_unet(&model, &img, 128, 16).unwrap();
            assert_eq!(out.plane_f32(0), img.plane_f32(0), "{w}x{h}");
        }
    }

    #[test]
    fn constant_zero_patch_model_outputs_zero() {
        let mut model = Model {
            net: Net::Patches(
                PatchRegressor::custom(1, 4, 3, &[16, 8], 40, HeadActivation::Linear, 0).unwrap(),
            ),
            norm: None,
        };
        if let Net::Patches(net) = &mut model.net {
            for p in net.params_mut() {
                for v in p.data_mut() {
                    *v = 0.0;
                }
            }
            net.bn.running.initialized = true;
        }
        let img = ramp_image(6, 5, 1);
        let out = predict_patch_image(&model, &img).unwrap();
        assert!(out.plane_f32(0).iter().all(|&v| v == 0.0));
        assert_eq!(out.width(), 6);
        assert_eq!(out.height(), 5);
    }

    #[test]
    fn patch_predictor_matches_reference_bit_exactly() {
        let mut model = Model {
            net: Net::Patches(
                PatchRegressor::custom(1, 3, 2, &[8], 40, HeadActivation::Linear, 5).unwrap(),
            ),
            norm: None,
        };
        if let Net::Patches(net) = &mut model.net {
            let warm = Tensor::filled(&[2, 1, 40, 40], 0.4);
            net.forward_train(&warm).unwrap();
        }
        let img = ramp_image(9, 8, 1);
        let fast = predict_patch_image(&model, &img).unwrap();
        let slow = predict_patch_image_reference(&model, &img).unwrap();
        let (a, b) = (fast.plane_f32(0), slow.plane_f32(0));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn count_params_ordering_patches_vs_unet() {
        let patches = build_patch_regressor(2, HeadActivation::Linear, 0).unwrap();
        let unet = build_residual_unet(2, 32, 0).unwrap();
        let cp = count_params(&patches);
        let cu = count_params(&unet);
        assert!(cp >= 10 * cu, "{cp} vs {cu}");
    }

    #[test]
    fn model_validate_passes() {
        build_patch_regressor(2, HeadActivation::Linear, 1).unwrap().validate().unwrap();
        build_residual_unet(1, 8, 1).unwrap().validate().unwrap();
    }

    #[test]
    fn arch_mismatch_errors() {
        let unet = build_residual_unet(1, 4, 0).unwrap();
        let img = ramp_image(8, 8, 1);
        assert!(matches!(
            predict_patch_image(&unet, &img),
            Err(Error::ArchMismatch { .. })
        ));
        let patches = build_patch_regressor(1, HeadActivation::Linear, 0).unwrap();
        assert!(matches!(
            predict_unet(&patches, &img, 128, 16),
            Err(Error::ArchMismatch { .. })
        ));
    }
}
