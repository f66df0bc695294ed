//! MSE and SSIM quality criteria plus the two-method ensemble average.
//!
//! SSIM follows the reference conventions: 11x11 Gaussian window with sigma
//! 1.5, K1 = 0.01, K2 = 0.03, symmetric boundary handling, computed per
//! channel and averaged. All arithmetic is f64.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{read_mpi, Image, ImageRecord, MetricReport};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// SSIM constants for a given dynamic range `L`.
#[derive(Clone, Copy, Debug)]
pub struct SsimConfig {
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl SsimConfig {
    pub fn with_range(dynamic_range: f64) -> Self {
        SsimConfig { dynamic_range, k1: 0.01, k2: 0.03 }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamic_range <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "SSIM dynamic range must be positive, got {}",
                self.dynamic_range
            )));
        }
        Ok(())
    }
}

fn geometry_check(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_geometry(b) {
        return Err(Error::shape(
            op,
            "geometry",
            format!("{}x{}x{}", a.channels(), a.height(), a.width()),
            format!("{}x{}x{}", b.channels(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// Mean squared difference over all samples of all channels, raw scale.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    geometry_check("mse", a, b)?;
    let mut acc = 0.0f64;
    let n = (a.width() * a.height() * a.channels()) as f64;
    for c in 0..a.channels() {
        for (x, y) in a.plane_f64(c).iter().zip(b.plane_f64(c)) {
            let d = x - y;
            acc += d * d;
        }
    }
    Ok(acc / n)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Symmetric boundary index: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let mut j = i % p;
    if j < 0 {
        j += p;
    }
    if j < n as isize {
        j as usize
    } else {
        (p - 1 - j) as usize
    }
}

/// Separable Gaussian filter with symmetric boundary handling.
fn gaussian_filter(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let half = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as isize + i as isize - half, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for x in 0..w {
        for y in 0..h {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + i as isize - half, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, cfg: &SsimConfig) -> Vec<f64> {
    let c1 = cfg.c1();
    let c2 = cfg.c2();
    let n = w * h;
    let mut aa = vec![0.0; n];
    let mut bb = vec![0.0; n];
    let mut ab = vec![0.0; n];
    for i in 0..n {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    let mu_a = gaussian_filter(a, w, h);
    let mu_b = gaussian_filter(b, w, h);
    let e_aa = gaussian_filter(&aa, w, h);
    let e_bb = gaussian_filter(&bb, w, h);
    let e_ab = gaussian_filter(&ab, w, h);
    let mut map = vec![0.0; n];
    for i in 0..n {
        let var_a = e_aa[i] - mu_a[i] * mu_a[i];
        let var_b = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2);
        map[i] = num / den;
    }
    map
}

/// Global SSIM: mean of the local map, averaged over channels.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_with_map(a, b, cfg)?.0)
}

/// SSIM plus the per-pixel map of the first channel.
pub fn ssim_with_map(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    geometry_check("ssim", a, b)?;
    cfg.validate()?;
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut first_map = Vec::new();
    for c in 0..a.channels() {
        let map = ssim_plane(&a.plane_f64(c), &b.plane_f64(c), w, h, cfg);
        let mean = map.iter().sum::<f64>() / map.len() as f64;
        total += mean;
        if c == 0 {
            first_map = map;
        }
    }
    Ok((total / a.channels() as f64, first_map))
}

/// Pixelwise `(a + b) / 2` in float32.
pub fn ensemble_average(a: &Image, b: &Image) -> Result<Image> {
    geometry_check("ensemble_average", a, b)?;
    let mut planes = Vec::with_capacity(a.channels());
    for c in 0..a.channels() {
        planes.push(
            a.plane_f64(c)
                .iter()
                .zip(b.plane_f64(c))
                .map(|(x, y)| ((x + y) / 2.0) as f32)
                .collect(),
        );
    }
    Image::from_f32_planes(a.width(), a.height(), planes)
}

fn mpi_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut stems = BTreeSet::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
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

/// Evaluates every prediction in `pred_dir` against the same stem in
/// `gt_dir`. The SSIM dynamic range defaults to the maximum sample over the
/// ground-truth set unless `ssim_l` overrides it.
pub fn evaluate_set(pred_dir: &Path, gt_dir: &Path, ssim_l: Option<f64>) -> Result<MetricReport> {
    let pred_stems = mpi_stems(pred_dir)?;
    let gt_stems = mpi_stems(gt_dir)?;
    if pred_stems != gt_stems {
        let only_pred: Vec<_> = pred_stems.difference(&gt_stems).cloned().collect();
        let only_gt: Vec<_> = gt_stems.difference(&pred_stems).cloned().collect();
        return Err(Error::UnmatchedStems(format!(
            "prediction-only {only_pred:?}, ground-truth-only {only_gt:?}"
        )));
    }
    let pairs: Vec<(String, Image, Image)> = pred_stems
        .iter()
        .map(|stem| {
            let pred = read_mpi(&pred_dir.join(format!("{stem}.mpi")))?;
            let gt = read_mpi(&gt_dir.join(format!("{stem}.mpi")))?;
            Ok((stem.clone(), pred, gt))
        })
        .collect::<Result<_>>()?;

    let l = match ssim_l {
        Some(l) => l,
        None => pairs.iter().map(|(_, _, gt)| gt.max_sample()).fold(f64::MIN, f64::max),
    };
    let cfg = SsimConfig::with_range(l);

    let mut records = Vec::with_capacity(pairs.len());
    for (name, pred, gt) in &pairs {
        records.push(ImageRecord {
            name: name.clone(),
            mse: mse(pred, gt)?,
            ssim: ssim(pred, gt, &cfg)?,
        });
    }
    Ok(MetricReport::new(records))
}
