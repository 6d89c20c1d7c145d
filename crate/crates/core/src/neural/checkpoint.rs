//! Model checkpoint files.
//!
//! Layout: magic `SEDM`, version `u16`, a `u32`-length-prefixed UTF-8
//! descriptor (architecture lines plus `norm=` lines), a `u32` block count,
//! then per block a `u16`-length-prefixed name, a `u32` value count and the
//! values as little-endian `f32`. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;

use super::model::{Architecture, Model, ModelParams};
use crate::error::{Error, Result};
use crate::volume::{FeatureType, NormStats};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEDM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained model plus the input normalization it was trained with, keyed by
/// input name.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: BTreeMap<String, NormStats>,
}

fn push_str(out: &mut Vec<u8>, s: &str, wide: bool) {
    if wide {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut descriptor = ck.model.arch.to_text();
    for (key, st) in &ck.norm {
        let (l, c) = st.mean.dim();
        descriptor.push_str(&format!("norm={key}:{}:{l}:{c}\n", st.feature_type.code()));
    }
    let mut blocks: Vec<(String, Vec<f64>)> = ck
        .model
        .all_blocks()
        .into_iter()
        .map(|(n, b)| (n, b.to_vec()))
        .collect();
    for (key, st) in &ck.norm {
        blocks.push((format!("norm.{key}.mean"), st.mean.iter().copied().collect()));
        blocks.push((format!("norm.{key}.std"), st.std.iter().copied().collect()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_str(&mut out, &descriptor, true);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, values) in blocks {
        push_str(&mut out, &name, false);
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::io(
                "<checkpoint>",
                io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut r = Reader { bytes, pos: 0 };
    r.take(4)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let descriptor = r.string(len)?;
    let mut arch_text = String::new();
    let mut norm_specs = Vec::new();
    for line in descriptor.lines() {
        match line.strip_prefix("norm=") {
            Some(spec) => {
                let parts: Vec<&str> = spec.split(':').collect();
                let parsed = (parts.len() == 4)
                    .then(|| {
                        let ft = FeatureType::from_code(parts[1].parse().ok()?)?;
                        Some((parts[0].to_string(), ft, parts[2].parse::<usize>().ok()?, parts[3].parse::<usize>().ok()?))
                    })
                    .flatten();
                norm_specs.push(parsed.ok_or_else(|| Error::Format(format!("bad norm line `{line}`")))?);
            }
            None => {
                arch_text.push_str(line);
                arch_text.push('\n');
            }
        }
    }
    let arch = Architecture::from_text(&arch_text)?;
    let count = r.u32()? as usize;
    let mut blocks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let n = r.u32()? as usize;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("block too large".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        blocks.insert(name, values);
    }
    let mut take_block = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = blocks
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks block {name}")))?;
        if v.len() != len {
            return Err(Error::Format(format!(
                "block {name} holds {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    };
    let params = ModelParams::zeros(&arch);
    let mut model = Model::new(arch, params)?;
    for (name, slot) in model.all_blocks_mut() {
        slot.copy_from_slice(&take_block(&name, slot.len())?);
    }
    let mut norm = BTreeMap::new();
    for (key, ft, l, c) in norm_specs {
        let mean = take_block(&format!("norm.{key}.mean"), l * c)?;
        let std = take_block(&format!("norm.{key}.std"), l * c)?;
        let shape = |v| Array2::from_shape_vec((l, c), v).expect("length checked");
        norm.insert(
            key,
            NormStats {
                feature_type: ft,
                mean: shape(mean),
                std: shape(std),
            },
        );
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::Format(format!("unexpected checkpoint block {extra}")));
    }
    Ok(Checkpoint { model, norm })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
