//! The `Image` container, its bit-exact on-disk format (MPI1), PGM
//! interchange, and the metric-report file.
//!
//! MPI1 layout, little-endian: magic `MPI1` · u32 width · u32 height ·
//! u16 channels · u16 bits_per_sample · u8 sample_format (0 = uint16,
//! 1 = float32) · planes in channel order, row-major. Raw acquisitions are
//! stored as uint16 counts; averaged frames and predictions as float32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MPI_MAGIC: &[u8; 4] = b"MPI1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Uint16,
    Float32,
}

#[derive(Clone, Debug, PartialEq)]
enum Planes {
    U16(Vec<Vec<u16>>),
    F32(Vec<Vec<f32>>),
}

/// Multi-channel 2-D intensity raster; samples are photon counts or detector
/// digital numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// 12 for organoid-style acquisitions, 16 otherwise, 0 for float32.
    bits_per_sample: u16,
    planes: Planes,
}

impl Image {
    pub fn from_u16_planes(
        width: usize,
        height: usize,
        bits_per_sample: u16,
        planes: Vec<Vec<u16>>,
    ) -> Result<Self> {
        check_channels(planes.len())?;
        if bits_per_sample == 0 || bits_per_sample > 16 {
            return Err(Error::InvalidConfig(format!(
                "bits_per_sample must be 1..=16 for uint16 images, got {bits_per_sample}"
            )));
        }
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != width * height {
                return Err(Error::shape("image", "plane length", width * height, plane.len()));
            }
            if bits_per_sample < 16 {
                let limit = 1u32 << bits_per_sample;
                if let Some(idx) = plane.iter().position(|&v| (v as u32) >= limit) {
                    return Err(Error::SampleOutOfRange {
                        value: plane[idx] as u32,
                        bits: bits_per_sample,
                        channel: c,
                        index: idx,
                    });
                }
            }
        }
        Ok(Image { width, height, bits_per_sample, planes: Planes::U16(planes) })
    }

    pub fn from_f32_planes(width: usize, height: usize, planes: Vec<Vec<f32>>) -> Result<Self> {
        check_channels(planes.len())?;
        for plane in &planes {
            if plane.len() != width * height {
                return Err(Error::shape("image", "plane length", width * height, plane.len()));
            }
        }
        Ok(Image { width, height, bits_per_sample: 0, planes: Planes::F32(planes) })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        match &self.planes {
            Planes::U16(p) => p.len(),
            Planes::F32(p) => p.len(),
        }
    }

    pub fn bits_per_sample(&self) -> u16 {
        self.bits_per_sample
    }

    pub fn sample_format(&self) -> SampleFormat {
        match &self.planes {
            Planes::U16(_) => SampleFormat::Uint16,
            Planes::F32(_) => SampleFormat::Float32,
        }
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels() == other.channels()
    }

    /// One channel's samples as f64, row-major.
    pub fn plane_f64(&self, channel: usize) -> Vec<f64> {
        match &self.planes {
            Planes::U16(p) => p[channel].iter().map(|&v| v as f64).collect(),
            Planes::F32(p) => p[channel].iter().map(|&v| v as f64).collect(),
        }
    }

    /// One channel's samples as f32, row-major.
    pub fn plane_f32(&self, channel: usize) -> Vec<f32> {
        match &self.planes {
            Planes::U16(p) => p[channel].iter().map(|&v| v as f32).collect(),
            Planes::F32(p) => p[channel].clone(),
        }
    }

    pub fn u16_planes(&self) -> Option<&Vec<Vec<u16>>> {
        match &self.planes {
            Planes::U16(p) => Some(p),
            Planes::F32(_) => None,
        }
    }

    pub fn max_sample(&self) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for c in 0..self.channels() {
            for v in self.plane_f64(c) {
                max = max.max(v);
            }
        }
        max
    }

    pub fn mean_sample(&self) -> f64 {
        let mut acc = 0.0;
        let n = (self.width * self.height * self.channels()) as f64;
        for c in 0..self.channels() {
            for v in self.plane_f64(c) {
                acc += v;
            }
        }
        acc / n
    }
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 1 || channels == 2 {
        Ok(())
    } else {
        Err(Error::UnsupportedChannels { got: channels })
    }
}

/// Writes a bit-exact MPI1 file.
pub fn write_mpi(image: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + image.width * image.height * image.channels() * 4);
    buf.extend_from_slice(MPI_MAGIC);
    buf.extend_from_slice(&(image.width as u32).to_le_bytes());
    buf.extend_from_slice(&(image.height as u32).to_le_bytes());
    buf.extend_from_slice(&(image.channels() as u16).to_le_bytes());
    buf.extend_from_slice(&image.bits_per_sample.to_le_bytes());
    match &image.planes {
        Planes::U16(planes) => {
            buf.push(0);
            let bits = image.bits_per_sample;
            for (c, plane) in planes.iter().enumerate() {
                if bits < 16 {
                    let limit = 1u32 << bits;
                    if let Some(idx) = plane.iter().position(|&v| (v as u32) >= limit) {
                        return Err(Error::SampleOutOfRange {
                            value: plane[idx] as u32,
                            bits,
                            channel: c,
                            index: idx,
                        });
                    }
                }
                for &v in plane {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Planes::F32(planes) => {
            buf.push(1);
            for plane in planes {
                for &v in plane {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Reads an MPI1 file back, bit-for-bit.
pub fn read_mpi(path: &Path) -> Result<Image> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 17 {
        return Err(Error::Truncated { format: "MPI1", detail: "header shorter than 17 bytes".into() });
    }
    if &buf[0..4] != MPI_MAGIC {
        return Err(Error::BadMagic { format: "MPI1", found: buf[0..4].to_vec() });
    }
    let width = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let channels = u16::from_le_bytes(buf[12..14].try_into().unwrap()) as usize;
    let bits = u16::from_le_bytes(buf[14..16].try_into().unwrap());
    let format = buf[16];
    check_channels(channels)?;
    let n = width * height;
    let body = &buf[17..];
    match format {
        0 => {
            if body.len() < n * channels * 2 {
                return Err(Error::Truncated {
                    format: "MPI1",
                    detail: format!("expected {} plane bytes, found {}", n * channels * 2, body.len()),
                });
            }
            let mut planes = Vec::with_capacity(channels);
            for c in 0..channels {
                let mut plane = Vec::with_capacity(n);
                for i in 0..n {
                    let off = (c * n + i) * 2;
                    plane.push(u16::from_le_bytes(body[off..off + 2].try_into().unwrap()));
                }
                planes.push(plane);
            }
            Image::from_u16_planes(width, height, bits, planes)
        }
        1 => {
            if body.len() < n * channels * 4 {
                return Err(Error::Truncated {
                    format: "MPI1",
                    detail: format!("expected {} plane bytes, found {}", n * channels * 4, body.len()),
                });
            }
            let mut planes = Vec::with_capacity(channels);
            for c in 0..channels {
                let mut plane = Vec::with_capacity(n);
                for i in 0..n {
                    let off = (c * n + i) * 4;
                    plane.push(f32::from_le_bytes(body[off..off + 4].try_into().unwrap()));
                }
                planes.push(plane);
            }
            Image::from_f32_planes(width, height, planes)
        }
        other => Err(Error::InvalidConfig(format!("MPI1: unknown sample format {other}"))),
    }
}

/// Writes one channel as a binary PGM (P5). Float samples are rounded and
/// clamped to [0, 65535]; 16-bit samples are big-endian per the PGM standard.
pub fn export_pgm(image: &Image, channel: usize, path: &Path) -> Result<()> {
    if channel >= image.channels() {
        return Err(Error::shape("export_pgm", "channel", image.channels() - 1, channel));
    }
    let (maxval, samples): (u32, Vec<u16>) = match &image.planes {
        Planes::U16(planes) => {
            let maxval = (1u32 << image.bits_per_sample) - 1;
            (maxval, planes[channel].clone())
        }
        Planes::F32(planes) => {
            let samples = planes[channel]
                .iter()
                .map(|&v| {
                    let r = (v as f64).round();
                    r.clamp(0.0, 65535.0) as u16
                })
                .collect();
            (65535, samples)
        }
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P5\n{} {}\n{}\n", image.width, image.height, maxval);
    let mut body = Vec::with_capacity(samples.len() * 2);
    if maxval <= 255 {
        for &v in &samples {
            body.push(v as u8);
        }
    } else {
        for &v in &samples {
            body.extend_from_slice(&v.to_be_bytes());
        }
    }
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&body))
        .map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (P5) into a single-channel uint16 image.
pub fn import_pgm(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 2 || &buf[0..2] != b"P5" {
        return Err(Error::BadMagic {
            format: "PGM",
            found: buf.iter().take(2).copied().collect(),
        });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated { format: "PGM", detail: "missing header field".into() });
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Truncated { format: "PGM", detail: "bad header field".into() })?;
    }
    let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::PgmMaxval(maxval));
    }
    pos += 1; // single whitespace byte after maxval
    let n = width * height;
    let mut plane = Vec::with_capacity(n);
    if maxval <= 255 {
        if buf.len() < pos + n {
            return Err(Error::Truncated { format: "PGM", detail: "raster shorter than header implies".into() });
        }
        plane.extend(buf[pos..pos + n].iter().map(|&b| b as u16));
    } else {
        if buf.len() < pos + 2 * n {
            return Err(Error::Truncated { format: "PGM", detail: "raster shorter than header implies".into() });
        }
        for i in 0..n {
            plane.push(u16::from_be_bytes([buf[pos + 2 * i], buf[pos + 2 * i + 1]]));
        }
    }
    let bits = 16 - (maxval as u16).leading_zeros() as u16;
    Image::from_u16_planes(width, height, bits, vec![plane])
}

/// One evaluated image in a [`MetricReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub mse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_mse: Option<f64>,
    pub mean_ssim: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchBlock {
    pub param_count: u64,
    pub predict_seconds: f64,
}

/// Per-image and aggregate MSE/SSIM plus optional timing/parameter metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageRecord>,
    pub aggregate: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bench: Option<BenchBlock>,
}

impl MetricReport {
    /// Builds a report; aggregates are the arithmetic means of the records.
    pub fn new(images: Vec<ImageRecord>) -> Self {
        let aggregate = if images.is_empty() {
            Aggregate { mean_mse: None, mean_ssim: None }
        } else {
            let n = images.len() as f64;
            Aggregate {
                mean_mse: Some(images.iter().map(|r| r.mse).sum::<f64>() / n),
                mean_ssim: Some(images.iter().map(|r| r.ssim).sum::<f64>() / n),
            }
        };
        MetricReport { images, aggregate, bench: None }
    }
}

pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string(report).expect("report serialization cannot fail");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let buf = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&buf).map_err(|e| Error::Json { path: path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn mpi_u16_round_trip() {
        let dir = tmp();
        let img = Image::from_u16_planes(2, 2, 16, vec![vec![0, 1, 65535, 3]]).unwrap();
        let path = dir.path().join("a.mpi");
        write_mpi(&img, &path).unwrap();
        let back = read_mpi(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mpi_f32_round_trip_bit_exact() {
        let dir = tmp();
        let vals = vec![0.0f32, -1.5, f32::MIN_POSITIVE, 1e30, 0.1 + 0.2];
        let img = Image::from_f32_planes(5, 1, vec![vals.clone()]).unwrap();
        let path = dir.path().join("b.mpi");
        write_mpi(&img, &path).unwrap();
        let back = read_mpi(&path).unwrap();
        let got = back.plane_f32(0);
        for (a, b) in vals.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mpi_file_size_matches_header_plus_planes() {
        // 512x512, 2 channels, 12-bit uint16: 17-byte header + 2*512*512*2.
        let dir = tmp();
        let plane = vec![0u16; 512 * 512];
        let img = Image::from_u16_planes(512, 512, 12, vec![plane.clone(), plane]).unwrap();
        let path = dir.path().join("c.mpi");
        write_mpi(&img, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 1_048_593);
    }

    #[test]
    fn sample_beyond_bit_depth_is_range_error() {
        let err = Image::from_u16_planes(1, 1, 12, vec![vec![4096]]).unwrap_err();
        assert!(matches!(err, Error::SampleOutOfRange { value: 4096, bits: 12, .. }));
        assert!(Image::from_u16_planes(1, 1, 12, vec![vec![4095]]).is_ok());
    }

    #[test]
    fn mpi_bad_magic() {
        let dir = tmp();
        let path = dir.path().join("bad.mpi");
        std::fs::write(&path, b"NOPE_____________________").unwrap();
        let err = read_mpi(&path).unwrap_err();
        assert!(matches!(err, Error::BadMagic { format: "MPI1", .. }));
    }

    #[test]
    fn mpi_truncated_planes() {
        let dir = tmp();
        let img = Image::from_u16_planes(4, 4, 16, vec![vec![7u16; 16]]).unwrap();
        let path = dir.path().join("t.mpi");
        write_mpi(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_mpi(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { format: "MPI1", .. }));
    }

    #[test]
    fn pgm_import_basic() {
        let dir = tmp();
        let path = dir.path().join("a.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        std::fs::write(&path, &bytes).unwrap();
        let img = import_pgm(&path).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert_eq!(img.u16_planes().unwrap()[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn pgm_round_trip_u16() {
        let dir = tmp();
        let img = Image::from_u16_planes(3, 2, 12, vec![vec![0, 100, 4095, 7, 8, 9]]).unwrap();
        let path = dir.path().join("rt.pgm");
        export_pgm(&img, 0, &path).unwrap();
        let back = import_pgm(&path).unwrap();
        assert_eq!(back.u16_planes().unwrap()[0], img.u16_planes().unwrap()[0]);
        assert_eq!(back.bits_per_sample(), 12);
    }

    #[test]
    fn pgm_export_clamps_floats() {
        let dir = tmp();
        let img = Image::from_f32_planes(2, 1, vec![vec![70000.2, -5.0]]).unwrap();
        let path = dir.path().join("cl.pgm");
        export_pgm(&img, 0, &path).unwrap();
        let back = import_pgm(&path).unwrap();
        assert_eq!(back.u16_planes().unwrap()[0], vec![65535, 0]);
    }

    #[test]
    fn pgm_rejects_non_p5() {
        let dir = tmp();
        let path = dir.path().join("p2.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(import_pgm(&path).unwrap_err(), Error::BadMagic { format: "PGM", .. }));
    }

    #[test]
    fn pgm_rejects_zero_maxval() {
        let dir = tmp();
        let path = dir.path().join("z.pgm");
        std::fs::write(&path, b"P5\n1 1\n0\n\0").unwrap();
        assert!(matches!(import_pgm(&path).unwrap_err(), Error::PgmMaxval(0)));
    }

    #[test]
    fn report_empty_serializes_null_aggregates() {
        let report = MetricReport::new(vec![]);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(json, r#"{"images":[],"aggregate":{"mean_mse":null,"mean_ssim":null}}"#);
    }

    #[test]
    fn report_aggregates_are_means() {
        let report = MetricReport::new(vec![
            ImageRecord { name: "a".into(), mse: 2.0, ssim: 1.0 },
            ImageRecord { name: "b".into(), mse: 4.0, ssim: 1.0 },
        ]);
        assert_eq!(report.aggregate.mean_mse, Some(3.0));
        assert_eq!(report.aggregate.mean_ssim, Some(1.0));

        let single = MetricReport::new(vec![ImageRecord { name: "c".into(), mse: 1.0, ssim: 1.0 }]);
        assert_eq!(single.aggregate.mean_mse, Some(1.0));
        assert_eq!(single.aggregate.mean_ssim, Some(1.0));
    }

    #[test]
    fn report_round_trip_with_bench() {
        let dir = tmp();
        let mut report = MetricReport::new(vec![ImageRecord { name: "x".into(), mse: 0.5, ssim: 0.25 }]);
        report.bench = Some(BenchBlock { param_count: 42, predict_seconds: 1.25 });
        let path = dir.path().join("r.json");
        write_report(&report, &path).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back.images[0].mse, 0.5);
        assert_eq!(back.bench.as_ref().unwrap().param_count, 42);
    }
}
