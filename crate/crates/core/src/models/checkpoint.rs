//! Checkpoint binary format, little-endian throughout:
//! magic `MPCK` · u32 version=1 · u8 arch (1 = patches, 2 = unet) ·
//! u32 hyper-block length + UTF-8 `key=value` lines · u32 tensor count ·
//! per tensor: u16 name length, name, u8 dtype (0 = f32), u8 rank,
//! rank x u32 dims, raw f32 data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::NormalizationParams;
use crate::error::{Error, Result};
use crate::models::{ArchId, HeadActivation, Model, Net, NormPair, PatchRegressor, ResidualUnet};
use crate::nn::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"MPCK";
pub const CKPT_VERSION: u32 = 1;

fn hyper_lines(model: &Model) -> String {
    let mut lines = Vec::new();
    match &model.net {
        Net::Patches(m) => {
            lines.push(format!("arch={}", ArchId::Patches.as_str()));
            lines.push(format!("in_channels={}", m.in_channels));
            lines.push(format!("conv1_filters={}", m.conv1.out_channels()));
            lines.push(format!("conv2_filters={}", m.conv2.out_channels()));
            let hidden: Vec<String> =
                m.dense[..m.dense.len() - 1].iter().map(|d| d.out_features().to_string()).collect();
            lines.push(format!("hidden={}", hidden.join(",")));
            lines.push(format!("patch={}", m.patch));
            lines.push(format!(
                "head={}",
                match m.head {
                    HeadActivation::Linear => "linear",
                    HeadActivation::Relu => "relu",
                }
            ));
            lines.push(format!("bn_initialized={}", u8::from(m.bn.running.initialized)));
        }
        Net::Unet(m) => {
            lines.push(format!("arch={}", ArchId::Unet.as_str()));
            lines.push(format!("in_channels={}", m.in_channels));
            lines.push(format!("base_filters={}", m.base_filters));
            lines.push(format!("kernel={}", super::unet::UNET_KERNEL));
            lines.push(format!("depth={}", super::unet::UNET_DEPTH));
        }
    }
    if let Some(norm) = &model.norm {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";");
        lines.push(format!("norm_src_lo={}", join(&norm.source.lo)));
        lines.push(format!("norm_src_hi={}", join(&norm.source.hi)));
        lines.push(format!("norm_tgt_lo={}", join(&norm.target.lo)));
        lines.push(format!("norm_tgt_hi={}", join(&norm.target.hi)));
    }
    lines.join("\n")
}

fn tensor_entries(model: &Model) -> Vec<(String, Tensor<f32>)> {
    let mut entries: Vec<(String, Tensor<f32>)> = model
        .param_names()
        .into_iter()
        .zip(model.params().into_iter().cloned())
        .collect();
    if let Net::Patches(m) = &model.net {
        let c = m.bn.channels();
        entries.push((
            "bn.running_mean".into(),
            Tensor::from_vec(&[c], m.bn.running.mean.clone()).unwrap(),
        ));
        entries.push((
            "bn.running_var".into(),
            Tensor::from_vec(&[c], m.bn.running.var.clone()).unwrap(),
        ));
    }
    entries
}

/// Serializes the model bit-exactly.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let hyper = hyper_lines(model);
    let entries = tensor_entries(model);

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(match model.arch() {
        ArchId::Patches => 1,
        ArchId::Unet => 2,
    });
    buf.extend_from_slice(&(hyper.len() as u32).to_le_bytes());
    buf.extend_from_slice(hyper.as_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(0); // dtype f32
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { format: "MPCK", detail: what.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

fn parse_hyper(block: &str) -> BTreeMap<String, String> {
    block
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn hyper_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("checkpoint hyper block missing {key}")))?
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("checkpoint hyper {key} is not an integer")))
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(';')
        .map(|x| {
            x.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad float {x} in checkpoint hyper block")))
        })
        .collect()
}

/// Deserializes a checkpoint; the round trip is bit-exact.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic { format: "MPCK", found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CKPT_VERSION });
    }
    let arch_byte = r.u8("arch id")?;
    let hyper_len = r.u32("hyper length")? as usize;
    let hyper_raw = r.take(hyper_len, "hyper block")?;
    let hyper = parse_hyper(
        std::str::from_utf8(hyper_raw)
            .map_err(|_| Error::InvalidConfig("checkpoint hyper block is not UTF-8".into()))?,
    );

    let tensor_count = r.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::InvalidConfig("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != 0 {
            return Err(Error::InvalidConfig(format!("tensor {name}: unknown dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = match r.take(numel * 4, "tensor data") {
            Ok(raw) => raw,
            Err(_) => return Err(Error::TruncatedTensor { name }),
        };
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }

    let in_channels = hyper_usize(&hyper, "in_channels")?;
    let mut model = match arch_byte {
        1 => {
            let conv1 = hyper_usize(&hyper, "conv1_filters")?;
            let conv2 = hyper_usize(&hyper, "conv2_filters")?;
            let patch = hyper_usize(&hyper, "patch")?;
            let hidden: Vec<usize> = hyper
                .get("hidden")
                .map(|s| s.split(',').map(|x| x.parse().unwrap_or(0)).collect())
                .unwrap_or_default();
            if hidden.iter().any(|&d| d == 0) {
                return Err(Error::InvalidConfig("bad hidden sizes in checkpoint".into()));
            }
            let head = match hyper.get("head").map(String::as_str) {
                Some("relu") => HeadActivation::Relu,
                _ => HeadActivation::Linear,
            };
            let mut net = PatchRegressor::custom(in_channels, conv1, conv2, &hidden, patch, head, 0)?;
            net.bn.running.initialized = hyper.get("bn_initialized").map(String::as_str) == Some("1");
            Model { net: Net::Patches(net), norm: None }
        }
        2 => {
            let base = hyper_usize(&hyper, "base_filters")?;
            let net = ResidualUnet::new(in_channels, base, 0)?;
            Model { net: Net::Unet(net), norm: None }
        }
        other => return Err(Error::InvalidConfig(format!("unknown architecture id {other}"))),
    };

    // Fill parameters by name, strictly.
    let names = model.param_names();
    {
        let mut params = model.params_mut();
        for (name, slot) in names.iter().zip(params.iter_mut()) {
            let tensor = tensors
                .remove(name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing tensor {name}")))?;
            if tensor.shape() != slot.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    "tensor shape",
                    format!("{:?}", slot.shape()),
                    format!("{:?}", tensor.shape()),
                ));
            }
            **slot = tensor;
        }
    }
    if let Net::Patches(m) = &mut model.net {
        let mean = tensors
            .remove("bn.running_mean")
            .ok_or_else(|| Error::InvalidConfig("checkpoint missing tensor bn.running_mean".into()))?;
        let var = tensors
            .remove("bn.running_var")
            .ok_or_else(|| Error::InvalidConfig("checkpoint missing tensor bn.running_var".into()))?;
        m.bn.running.mean = mean.into_data();
        m.bn.running.var = var.into_data();
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::InvalidConfig(format!("checkpoint has unexpected tensor {name}")));
    }

    if let Some(lo) = hyper.get("norm_src_lo") {
        let norm = NormPair {
            source: NormalizationParams {
                lo: parse_f64_list(lo)?,
                hi: parse_f64_list(hyper.get("norm_src_hi").map(String::as_str).unwrap_or(""))?,
            },
            target: NormalizationParams {
                lo: parse_f64_list(hyper.get("norm_tgt_lo").map(String::as_str).unwrap_or(""))?,
                hi: parse_f64_list(hyper.get("norm_tgt_hi").map(String::as_str).unwrap_or(""))?,
            },
        };
        model.norm = Some(norm);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_residual_unet, count_params};
    use crate::nn::tensor::MatmulPar;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn unet_round_trip_is_bit_exact() {
        let dir = tmp();
        let mut model = build_residual_unet(2, 4, 9).unwrap();
        model.norm = Some(NormPair {
            source: NormalizationParams { lo: vec![1.5, 2.5], hi: vec![100.25, 200.0] },
            target: NormalizationParams { lo: vec![0.1, 0.2], hi: vec![1000.0, 4095.0] },
        });
        let path = dir.path().join("u.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (a, b) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(model.norm, back.norm);
        assert_eq!(count_params(&model), count_params(&back));
    }

    #[test]
    fn patches_round_trip_preserves_predictions() {
        let dir = tmp();
        let mut model = Model {
            net: Net::Patches(
                PatchRegressor::custom(1, 6, 4, &[32, 16], 40, HeadActivation::Linear, 4).unwrap(),
            ),
            norm: None,
        };
        if let Net::Patches(net) = &mut model.net {
            let warm = Tensor::filled(&[2, 1, 40, 40], 0.7);
            net.forward_train(&warm).unwrap();
        }
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();

        let probe = Tensor::filled(&[1, 40, 40], 0.3);
        let (a, b) = match (&model.net, &back.net) {
            (Net::Patches(m1), Net::Patches(m2)) => {
                (m1.forward_eval(&probe).unwrap(), m2.forward_eval(&probe).unwrap())
            }
            _ => panic!("arch changed"),
        };
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn unet_round_trip_preserves_predictions() {
        let dir = tmp();
        let model = build_residual_unet(1, 3, 11).unwrap();
        let path = dir.path().join("u2.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let mut probe = Tensor::zeros(&[1, 8, 8]);
        for (i, v) in probe.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.11).cos();
        }
        let (a, b) = match (&model.net, &back.net) {
            (Net::Unet(m1), Net::Unet(m2)) => (
                m1.predict_sample(&probe, MatmulPar::Serial).unwrap(),
                m2.predict_sample(&probe, MatmulPar::Serial).unwrap(),
            ),
            _ => panic!("arch changed"),
        };
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupt_magic_is_distinct_error() {
        let dir = tmp();
        let model = build_residual_unet(1, 2, 0).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::BadMagic { format: "MPCK", .. }));
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let dir = tmp();
        let model = build_residual_unet(1, 2, 0).unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::VersionMismatch { found: 9, expected: 1 }
        ));
    }

    #[test]
    fn truncated_tensor_names_the_tensor() {
        let dir = tmp();
        let model = build_residual_unet(1, 2, 0).unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::TruncatedTensor { name } => assert_eq!(name, "head_s.bias"),
            other => panic!("unexpected {other}"),
        }
    }
}
