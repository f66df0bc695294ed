//! Physics-based synthetic data: fluorophore scenes and Poisson photon-count
//! acquisitions under the two degradation regimes (low excitation power,
//! few averaged frames).
//!
//! Two-photon emission scales with the square of excitation intensity, so a
//! pixel's expected count is `k * (power/ref_power)^2 * density`. All
//! randomness is keyed per (seed, frame, channel, pixel), making frames
//! independent and generation order-free.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{write_mpi, Image};
use crate::seeds;

/// Counts are stored as 12-bit detector values.
pub const COUNTER_BITS: u16 = 12;

/// Per-channel fluorophore density map, mean-normalized to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// One density plane per channel, row-major, all values >= 0 and finite.
    pub densities: Vec<Vec<f64>>,
}

impl Scene {
    pub fn channels(&self) -> usize {
        self.densities.len()
    }

    /// Constant-density scene; handy for calibration and statistics tests.
    pub fn uniform(width: usize, height: usize, channels: usize, density: f64) -> Self {
        Scene { width, height, densities: vec![vec![density; width * height]; channels] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    /// Single frames at low vs high excitation power.
    Power,
    /// Many frames at fixed power; quality comes from averaging.
    Frames,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub mode: AcquisitionMode,
    /// Excitation power of the acquisition, mW.
    pub power_mw: f64,
    /// Reference (high) power at which `k` is calibrated, mW.
    pub ref_power_mw: f64,
    pub frames_total: usize,
    pub frames_used: usize,
    /// Expected photons per pixel at reference power for unit density.
    pub k: f64,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            mode: AcquisitionMode::Power,
            power_mw: 50.0,
            ref_power_mw: 300.0,
            frames_total: 70,
            frames_used: 7,
            k: 200.0,
            seed: 42,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.power_mw <= 0.0 || self.ref_power_mw <= 0.0 {
            return Err(Error::InvalidConfig("powers must be positive".into()));
        }
        if self.frames_used == 0 || self.frames_used > self.frames_total {
            return Err(Error::InvalidConfig(format!(
                "frames_used must be in 1..=frames_total ({} vs {})",
                self.frames_used, self.frames_total
            )));
        }
        if self.k <= 0.0 {
            return Err(Error::InvalidConfig("brightness k must be positive".into()));
        }
        Ok(())
    }

    /// Two-photon square law: the fraction of `k` seen at `power_mw`.
    pub fn power_scale(&self) -> f64 {
        let r = self.power_mw / self.ref_power_mw;
        r * r
    }

    /// Expected photon count for one pixel of the given density.
    pub fn expected_rate(&self, density: f64) -> f64 {
        self.k * self.power_scale() * density
    }
}

fn gauss(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}

fn paint_cells(plane: &mut [f64], width: usize, height: usize, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    // Smooth background.
    for _ in 0..3 {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let sigma = rng.random_range(0.25..0.5) * width.min(height) as f64;
        let amp: f64 = rng.random_range(0.1..0.4);
        for y in 0..height {
            for x in 0..width {
                let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (sigma * sigma);
                plane[y * width + x] += amp * (-0.5 * d2).exp();
            }
        }
    }
    // Elliptical cells with bright rings.
    let n_cells = rng.random_range(20..=80);
    for _ in 0..n_cells {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let rx: f64 = rng.random_range(2.5..10.0);
        let ry: f64 = rng.random_range(2.5..10.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.6..2.5);
        let ring_pos = rng.random_range(0.6..1.0);
        let ring_width = rng.random_range(0.15..0.35);
        let (sin_t, cos_t) = theta.sin_cos();
        let reach = 2.0 * rx.max(ry);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width - 1);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * cos_t + dy * sin_t) / rx;
                let v = (-dx * sin_t + dy * cos_t) / ry;
                let rho = (u * u + v * v).sqrt();
                let ring = gauss((rho - ring_pos) / ring_width);
                let core = 0.35 * gauss(rho / 0.6);
                plane[y * width + x] += amp * (ring + core);
            }
        }
    }
}

fn paint_filaments(plane: &mut [f64], width: usize, height: usize, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for v in plane.iter_mut() {
        *v += 0.08;
    }
    let n_strokes = rng.random_range(20..=80);
    for _ in 0..n_strokes {
        let mut x = rng.random_range(0.0..width as f64);
        let mut y = rng.random_range(0.0..height as f64);
        let mut dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let length = rng.random_range(0.3..0.9) * width.min(height) as f64;
        let sigma = rng.random_range(0.8..1.6);
        let amp = rng.random_range(0.5..2.0);
        let steps = (length / 0.5).ceil() as usize;
        for _ in 0..steps {
            dir += rng.random_range(-0.15..0.15);
            x += 0.5 * dir.cos();
            y += 0.5 * dir.sin();
            if x < -3.0 * sigma || y < -3.0 * sigma
                || x > width as f64 + 3.0 * sigma || y > height as f64 + 3.0 * sigma
            {
                break;
            }
            let reach = (3.0 * sigma).ceil() as isize;
            let xi = x.round() as isize;
            let yi = y.round() as isize;
            for py in (yi - reach).max(0)..=(yi + reach).min(height as isize - 1) {
                for px in (xi - reach).max(0)..=(xi + reach).min(width as isize - 1) {
                    let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                    // Scaled down so accumulating along the stroke stays O(amp).
                    plane[py as usize * width + px as usize] +=
                        0.25 * amp * (-0.5 * d2 / (sigma * sigma)).exp();
                }
            }
        }
    }
}

/// Seed-deterministic synthetic scene: channel 0 carries organoid-like cells
/// with ring structure, channel 1 collagen-like filament strokes. Densities
/// are scaled to mean exactly 1.
pub fn generate_scene(seed: u64, width: usize, height: usize, channels: usize) -> Result<Scene> {
    if width < 16 || height < 16 {
        return Err(Error::InvalidConfig(format!(
            "scene dimensions must be >= 16, got {width}x{height}"
        )));
    }
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedChannels { got: channels });
    }
    let mut densities = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, 0x5ce2e, c as u64]));
        let mut plane = vec![0.0f64; width * height];
        if c == 0 {
            paint_cells(&mut plane, width, height, &mut rng);
        } else {
            paint_filaments(&mut plane, width, height, &mut rng);
        }
        for v in plane.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mean: f64 = plane.iter().sum::<f64>() / plane.len() as f64;
        for v in plane.iter_mut() {
            *v /= mean;
        }
        densities.push(plane);
    }
    Ok(Scene { width, height, densities })
}

/// Draws one photon-count frame. Each pixel's count is Poisson with
/// `lambda = k * (power/ref)^2 * density`, from an RNG keyed by
/// (seed, frame_index, channel, pixel).
pub fn acquire_frame(scene: &Scene, config: &AcquisitionConfig, frame_index: usize) -> Result<Image> {
    config.validate()?;
    let limit = (1u32 << COUNTER_BITS) - 1;
    let scale = config.k * config.power_scale();
    let mut planes = Vec::with_capacity(scene.channels());
    for (c, density) in scene.densities.iter().enumerate() {
        let counts: Result<Vec<u16>> = density
            .par_iter()
            .enumerate()
            .map(|(i, &d)| {
                let lambda = scale * d;
                if lambda > limit as f64 {
                    return Err(Error::RateOverflow {
                        lambda,
                        x: i % scene.width,
                        y: i / scene.width,
                        channel: c,
                        bits: COUNTER_BITS,
                    });
                }
                if lambda <= 0.0 {
                    return Ok(0u16);
                }
                let key = seeds::derive(&[config.seed, frame_index as u64, c as u64, i as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                let draw: f64 = Poisson::new(lambda).expect("lambda > 0").sample(&mut rng);
                let count = draw as u64;
                if count > limit as u64 {
                    return Err(Error::RateOverflow {
                        lambda,
                        x: i % scene.width,
                        y: i / scene.width,
                        channel: c,
                        bits: COUNTER_BITS,
                    });
                }
                Ok(count as u16)
            })
            .collect();
        planes.push(counts?);
    }
    Image::from_u16_planes(scene.width, scene.height, COUNTER_BITS, planes)
}

/// Pixelwise arithmetic mean of the first `k` frames, as float32.
pub fn average_frames(frames: &[Image], k: usize) -> Result<Image> {
    if k == 0 || k > frames.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot average {k} of {} frames",
            frames.len()
        )));
    }
    let first = &frames[0];
    for f in &frames[1..k] {
        if !f.same_geometry(first) {
            return Err(Error::shape(
                "average_frames",
                "geometry",
                format!("{}x{}", first.width(), first.height()),
                format!("{}x{}", f.width(), f.height()),
            ));
        }
    }
    let n = first.width() * first.height();
    let mut planes = Vec::with_capacity(first.channels());
    for c in 0..first.channels() {
        let mut acc = vec![0.0f64; n];
        for f in &frames[..k] {
            for (a, v) in acc.iter_mut().zip(f.plane_f64(c)) {
                *a += v;
            }
        }
        planes.push(acc.into_iter().map(|v| (v / k as f64) as f32).collect());
    }
    Image::from_f32_planes(first.width(), first.height(), planes)
}

/// `manifest.json` sidecar describing a simulated dataset.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: AcquisitionMode,
    pub power_mw: f64,
    pub ref_power_mw: f64,
    pub frames_total: usize,
    pub frames_used: usize,
    pub k: f64,
    pub seed: u64,
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Manifest {
    pub fn config(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            mode: self.mode,
            power_mw: self.power_mw,
            ref_power_mw: self.ref_power_mw,
            frames_total: self.frames_total,
            frames_used: self.frames_used,
            k: self.k,
            seed: self.seed,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let buf = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&buf).map_err(|e| Error::Json { path: path.into(), source: e })
}

#[derive(Clone, Copy, Debug)]
pub struct DatasetSummary {
    pub pairs: usize,
    pub mean_source: f64,
    pub mean_target: f64,
}

fn simulate_pair(config: &AcquisitionConfig, image_index: usize, width: usize, height: usize, channels: usize) -> Result<(Image, Image)> {
    let scene_seed = seeds::derive(&[config.seed, 0x5ce2e_11, image_index as u64]);
    let scene = generate_scene(scene_seed, width, height, channels)?;
    let stream = AcquisitionConfig {
        seed: seeds::derive(&[config.seed, 0xac_0_15e, image_index as u64]),
        ..*config
    };
    match config.mode {
        AcquisitionMode::Power => {
            // Source: one low-power frame. Target: one high-power frame with
            // independent noise (distinct frame index).
            let source = acquire_frame(&scene, &stream, 0)?;
            let target_cfg = AcquisitionConfig { power_mw: stream.ref_power_mw, ..stream };
            let target = acquire_frame(&scene, &target_cfg, 1)?;
            Ok((source, target))
        }
        AcquisitionMode::Frames => {
            let frames: Result<Vec<Image>> =
                (0..config.frames_total).map(|f| acquire_frame(&scene, &stream, f)).collect();
            let frames = frames?;
            let source = average_frames(&frames, config.frames_used)?;
            let target = average_frames(&frames, config.frames_total)?;
            Ok((source, target))
        }
    }
}

/// Simulates `n_images` paired acquisitions into `<out_root>/{source,target}`
/// plus `manifest.json`. Every byte is a deterministic function of the
/// config.
pub fn make_paired_dataset(
    config: &AcquisitionConfig,
    n_images: usize,
    width: usize,
    height: usize,
    channels: usize,
    out_root: &Path,
) -> Result<DatasetSummary> {
    config.validate()?;
    if n_images == 0 {
        return Err(Error::EmptyDataset { what: "simulation request".into() });
    }
    let src_dir = out_root.join("source");
    let tgt_dir = out_root.join("target");
    fs::create_dir_all(&src_dir).map_err(|e| Error::io(&src_dir, e))?;
    fs::create_dir_all(&tgt_dir).map_err(|e| Error::io(&tgt_dir, e))?;

    let pairs: Result<Vec<(Image, Image)>> = (0..n_images)
        .into_par_iter()
        .map(|i| simulate_pair(config, i, width, height, channels))
        .collect();
    let pairs = pairs?;

    let mut mean_source = 0.0;
    let mut mean_target = 0.0;
    for (i, (source, target)) in pairs.iter().enumerate() {
        let stem = format!("img_{i:04}");
        write_mpi(source, &src_dir.join(format!("{stem}.mpi")))?;
        write_mpi(target, &tgt_dir.join(format!("{stem}.mpi")))?;
        mean_source += source.mean_sample();
        mean_target += target.mean_sample();
    }
    mean_source /= n_images as f64;
    mean_target /= n_images as f64;

    let manifest = Manifest {
        mode: config.mode,
        power_mw: config.power_mw,
        ref_power_mw: config.ref_power_mw,
        frames_total: config.frames_total,
        frames_used: config.frames_used,
        k: config.k,
        seed: config.seed,
        n_images,
        width,
        height,
        channels,
    };
    let manifest_path = out_root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(DatasetSummary { pairs: n_images, mean_source, mean_target })
}
