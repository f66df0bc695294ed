//! Patch/tile extraction, normalization, dataset splitting, and deterministic
//! batching for both training schemes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_mpi, Image};
use crate::nn::Tensor;
use crate::seeds;

/// Side length of the square neighborhood fed to the patch regressor.
pub const PATCH: usize = 40;
/// The anchor pixel sits at this offset inside its patch; the patch spans
/// rows `r-19 ..= r+20`.
pub const PATCH_ANCHOR: usize = 19;

/// A (source, ground-truth) image pair sharing geometry.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub source: Image,
    pub target: Image,
    pub name: String,
}

impl PairedSample {
    pub fn new(source: Image, target: Image, name: impl Into<String>) -> Result<Self> {
        if !source.same_geometry(&target) {
            return Err(Error::shape(
                "paired sample",
                "geometry",
                format!("{}x{}x{}", source.channels(), source.height(), source.width()),
                format!("{}x{}x{}", target.channels(), target.height(), target.width()),
            ));
        }
        Ok(PairedSample { source, target, name: name.into() })
    }
}

/// `[C,H,W]` f32 tensor view of an image's samples.
pub fn image_to_tensor(image: &Image) -> Tensor<f32> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        data.extend(image.plane_f32(ci));
    }
    Tensor::from_vec(&[c, h, w], data).unwrap()
}

/// Packs a `[C,H,W]` tensor into a float32 image.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<Image> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let planes = (0..c).map(|ci| t.data()[ci * h * w..(ci + 1) * h * w].to_vec()).collect();
    Image::from_f32_planes(w, h, planes)
}

/// Exhaustive per-pixel patch set: inputs `[N,C,40,40]`, targets `[N,C]`.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub origins: Vec<(usize, usize)>,
}

/// Copies the zero-padded 40x40 neighborhood anchored at `(row, col)` out of
/// `[C,H,W]` image data into `dst` (`C*40*40` values).
pub fn copy_patch_at(img: &Tensor<f32>, row: usize, col: usize, dst: &mut [f32]) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    dst.fill(0.0);
    let r0 = row as isize - PATCH_ANCHOR as isize;
    let c0 = col as isize - PATCH_ANCHOR as isize;
    for ci in 0..c {
        let plane = &img.data()[ci * h * w..(ci + 1) * h * w];
        let out = &mut dst[ci * PATCH * PATCH..(ci + 1) * PATCH * PATCH];
        for pr in 0..PATCH {
            let ir = r0 + pr as isize;
            if ir < 0 || ir >= h as isize {
                continue;
            }
            let pc_lo = (-c0).max(0) as usize;
            let pc_hi = ((w as isize - c0).min(PATCH as isize)).max(0) as usize;
            let src_row = &plane[ir as usize * w..ir as usize * w + w];
            let dst_row = &mut out[pr * PATCH..pr * PATCH + PATCH];
            for pc in pc_lo..pc_hi {
                dst_row[pc] = src_row[(c0 + pc as isize) as usize];
            }
        }
    }
}

/// One 40x40 patch per pixel of the pair's source, zero-padded at borders;
/// the target is the target image's value(s) at the anchor pixel.
pub fn extract_pixel_patches(pair: &PairedSample) -> PatchSet {
    let src = image_to_tensor(&pair.source);
    let tgt = image_to_tensor(&pair.target);
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let n = h * w;
    let mut inputs = Tensor::zeros(&[n, c, PATCH, PATCH]);
    let mut targets = Tensor::zeros(&[n, c]);
    let mut origins = Vec::with_capacity(n);
    let patch_len = c * PATCH * PATCH;
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            copy_patch_at(&src, row, col, &mut inputs.data_mut()[i * patch_len..(i + 1) * patch_len]);
            for ci in 0..c {
                targets.data_mut()[i * c + ci] = tgt.data()[(ci * h + row) * w + col];
            }
            origins.push((row, col));
        }
    }
    PatchSet { inputs, targets, origins }
}

/// A patch address inside a list of pairs; used to train on sampled patches
/// without materializing them all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub pair: usize,
    pub row: usize,
    pub col: usize,
}

/// Uniformly samples `count` patch anchors across all pairs.
pub fn sample_patch_origins(pairs: &[PairedSample], count: usize, seed: u64) -> Result<Vec<PatchOrigin>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "patch sampling".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, 0x7a7c_4e5]));
    let mut origins = Vec::with_capacity(count);
    for _ in 0..count {
        let pair = rng.random_range(0..pairs.len());
        let row = rng.random_range(0..pairs[pair].source.height());
        let col = rng.random_range(0..pairs[pair].source.width());
        origins.push(PatchOrigin { pair, row, col });
    }
    Ok(origins)
}

/// Materializes a batch of sampled patches: inputs `[B,C,40,40]`, targets `[B,C]`.
pub fn assemble_patch_batch(
    sources: &[Tensor<f32>],
    targets: &[Tensor<f32>],
    origins: &[PatchOrigin],
    batch: &[usize],
) -> (Tensor<f32>, Tensor<f32>) {
    let c = sources[0].shape()[0];
    let patch_len = c * PATCH * PATCH;
    let mut x = Tensor::zeros(&[batch.len(), c, PATCH, PATCH]);
    let mut y = Tensor::zeros(&[batch.len(), c]);
    for (bi, &oi) in batch.iter().enumerate() {
        let o = origins[oi];
        let src = &sources[o.pair];
        copy_patch_at(src, o.row, o.col, &mut x.data_mut()[bi * patch_len..(bi + 1) * patch_len]);
        let t = &targets[o.pair];
        let (h, w) = (t.shape()[1], t.shape()[2]);
        for ci in 0..c {
            y.data_mut()[bi * c + ci] = t.data()[(ci * h + o.row) * w + o.col];
        }
    }
    (x, y)
}

/// Training tiles cut from paired images: `inputs[i]`/`targets[i]` are
/// `[C,tile,tile]` crops at identical origins.
#[derive(Clone, Debug)]
pub struct TileSet {
    pub inputs: Vec<Tensor<f32>>,
    pub targets: Vec<Tensor<f32>>,
    pub tile: usize,
}

/// Reflect-pads (symmetric, edge repeated) the trailing spatial axes up to at
/// least `min_h` x `min_w`.
pub fn pad_reflect(t: &Tensor<f32>, min_h: usize, min_w: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if h >= min_h && w >= min_w {
        return t.clone();
    }
    let nh = h.max(min_h);
    let nw = w.max(min_w);
    let reflect = |i: usize, n: usize| -> usize {
        let p = 2 * n;
        let j = i % p;
        if j < n {
            j
        } else {
            p - 1 - j
        }
    };
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ci in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for x in 0..nw {
                let sx = reflect(x, w);
                out.data_mut()[(ci * nh + y) * nw + x] = t.data()[(ci * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Cuts `per_image` random tiles from each pair at seed-derived origins.
pub fn extract_tiles(pairs: &[PairedSample], tile: usize, per_image: usize, seed: u64) -> Result<TileSet> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "tile extraction".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, 0x7113]));
    let mut inputs = Vec::with_capacity(pairs.len() * per_image);
    let mut targets = Vec::with_capacity(pairs.len() * per_image);
    for pair in pairs {
        let src = pad_reflect(&image_to_tensor(&pair.source), tile, tile);
        let tgt = pad_reflect(&image_to_tensor(&pair.target), tile, tile);
        let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
        for _ in 0..per_image {
            let y0 = rng.random_range(0..=h - tile);
            let x0 = rng.random_range(0..=w - tile);
            let mut sx = Tensor::zeros(&[c, tile, tile]);
            let mut tx = Tensor::zeros(&[c, tile, tile]);
            for ci in 0..c {
                for y in 0..tile {
                    let src_off = (ci * h + y0 + y) * w + x0;
                    let dst_off = (ci * tile + y) * tile;
                    sx.data_mut()[dst_off..dst_off + tile]
                        .copy_from_slice(&src.data()[src_off..src_off + tile]);
                    tx.data_mut()[dst_off..dst_off + tile]
                        .copy_from_slice(&tgt.data()[src_off..src_off + tile]);
                }
            }
            inputs.push(sx);
            targets.push(tx);
        }
    }
    Ok(TileSet { inputs, targets, tile })
}

/// Per-channel intensity window: 1st and 99.8th percentiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

const LO_PERCENTILE: f64 = 1.0;
const HI_PERCENTILE: f64 = 99.8;

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p / 100.0 * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

impl NormalizationParams {
    /// Pools samples across `images` per channel (stride-subsampled beyond
    /// ~4M values) and takes the 1 / 99.8 percentiles.
    pub fn from_images<'a>(images: impl Iterator<Item = &'a Image> + Clone) -> Result<Self> {
        let channels = images.clone().next().map(|i| i.channels()).ok_or_else(|| {
            Error::EmptyDataset { what: "normalization".into() }
        })?;
        let mut lo = Vec::with_capacity(channels);
        let mut hi = Vec::with_capacity(channels);
        for c in 0..channels {
            let total: usize = images.clone().map(|i| i.width() * i.height()).sum();
            let stride = (total / 4_000_000).max(1);
            let mut pool = Vec::with_capacity(total / stride + 1);
            for img in images.clone() {
                let plane = img.plane_f64(c);
                pool.extend(plane.into_iter().step_by(stride));
            }
            pool.sort_by(|a, b| a.total_cmp(b));
            let l = percentile(&pool, LO_PERCENTILE);
            let h = percentile(&pool, HI_PERCENTILE);
            if h <= l {
                return Err(Error::DegenerateNormalization { channel: c, value: l });
            }
            lo.push(l);
            hi.push(h);
        }
        Ok(NormalizationParams { lo, hi })
    }
}

/// `(x - lo) / (hi - lo)` per channel, unclamped; output is float32.
pub fn normalize(image: &Image, params: &NormalizationParams) -> Result<Image> {
    let mut planes = Vec::with_capacity(image.channels());
    for c in 0..image.channels() {
        let (lo, hi) = (params.lo[c], params.hi[c]);
        if hi <= lo {
            return Err(Error::DegenerateNormalization { channel: c, value: lo });
        }
        let scale = 1.0 / (hi - lo);
        planes.push(
            image
                .plane_f64(c)
                .into_iter()
                .map(|v| ((v - lo) * scale) as f32)
                .collect(),
        );
    }
    Image::from_f32_planes(image.width(), image.height(), planes)
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &Image, params: &NormalizationParams) -> Result<Image> {
    let mut planes = Vec::with_capacity(image.channels());
    for c in 0..image.channels() {
        let (lo, hi) = (params.lo[c], params.hi[c]);
        planes.push(
            image
                .plane_f64(c)
                .into_iter()
                .map(|v| (v * (hi - lo) + lo) as f32)
                .collect(),
        );
    }
    Image::from_f32_planes(image.width(), image.height(), planes)
}

/// Seed-derived permutation split; the last `n_test` indices of the
/// permutation form the test set.
pub fn split_dataset(n: usize, n_test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidConfig(format!(
            "test count must satisfy 0 < n_test < n ({n_test} vs {n})"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, 0x5b117]));
    perm.shuffle(&mut rng);
    let test = perm.split_off(n - n_test);
    Ok((perm, test))
}

/// Epoch-specific shuffled mini-batches over `0..n_items`; the final short
/// batch is kept.
pub fn batches(n_items: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n_items == 0 {
        return Err(Error::EmptyDataset { what: "batching".into() });
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, 0xba7c4, epoch as u64]));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// `split.json` sidecar recording which stems were held out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test: Vec<String>,
}

pub fn write_split(manifest: &SplitManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("split serialization");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<SplitManifest> {
    let buf = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&buf).map_err(|e| Error::Json { path: path.into(), source: e })
}

fn mpi_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut stems = BTreeSet::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("mpi") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    Ok(stems)
}

/// Loads `<root>/source/<stem>.mpi` + `<root>/target/<stem>.mpi` pairs,
/// sorted by stem. Stems present on only one side are an error.
pub fn load_pairs(root: &Path) -> Result<Vec<PairedSample>> {
    let src_dir = root.join("source");
    let tgt_dir = root.join("target");
    let src_stems = mpi_stems(&src_dir)?;
    let tgt_stems = mpi_stems(&tgt_dir)?;
    if src_stems != tgt_stems {
        let only_src: Vec<_> = src_stems.difference(&tgt_stems).cloned().collect();
        let only_tgt: Vec<_> = tgt_stems.difference(&src_stems).cloned().collect();
        return Err(Error::UnmatchedStems(format!(
            "source-only {only_src:?}, target-only {only_tgt:?}"
        )));
    }
    if src_stems.is_empty() {
        return Err(Error::EmptyDataset { what: format!("{}", root.display()) });
    }
    let mut pairs = Vec::with_capacity(src_stems.len());
    for stem in src_stems {
        let source = read_mpi(&src_dir.join(format!("{stem}.mpi")))?;
        let target = read_mpi(&tgt_dir.join(format!("{stem}.mpi")))?;
        pairs.push(PairedSample::new(source, target, stem)?);
    }
    Ok(pairs)
}
