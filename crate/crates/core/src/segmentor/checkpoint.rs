//! Binary checkpoint format.
//!
//! ```text
//! ANYSEG-CKPT v1\n
//! frozen=<0|1> height=<h> width=<w> tensors=<n>\n
//! n records: u32 name length, name bytes, u32 rank, rank x u32 extent,
//!            little-endian f32 values
//! u64 FNV-1a digest of every preceding byte
//! ```
//! All integers are little-endian.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::{ModelShape, SegmentorParams, NUM_STAGES};
use crate::autodiff::Tensor;
use crate::error::{AnysegError, Result};

pub const CHECKPOINT_MAGIC: &str = "ANYSEG-CKPT v1";

pub(crate) fn digest(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Serialized body without the trailing digest.
pub(crate) fn encode(params: &SegmentorParams<f32>) -> Vec<u8> {
    let tensors = params.named_tensors();
    let shape = params.shape();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    let meta = format!(
        "frozen={} height={} width={} tensors={}\n",
        u8::from(params.is_frozen()),
        shape.height,
        shape.width,
        tensors.len()
    );
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_bytes(params: &SegmentorParams<f32>) -> Vec<u8> {
    let mut body = encode(params);
    let sum = digest(&body);
    body.extend_from_slice(&sum.to_le_bytes());
    body
}

/// Writes atomically through a sibling temporary file.
pub fn write_checkpoint(params: &SegmentorParams<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(params)).map_err(|e| AnysegError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AnysegError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<SegmentorParams<f32>> {
    let bytes = fs::read(path).map_err(|e| AnysegError::io(path, e))?;
    parse_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AnysegError::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let len = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| AnysegError::Format("missing header line".into()))?;
        let line = std::str::from_utf8(&rest[..len]).map_err(|_| AnysegError::Format("header is not UTF-8".into()))?;
        self.pos += len + 1;
        Ok(line)
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<SegmentorParams<f32>> {
    if !bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()) {
        return Err(AnysegError::Format(format!("missing `{CHECKPOINT_MAGIC}` header")));
    }
    if bytes.len() < 8 {
        return Err(AnysegError::Format("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = digest(body);
    if stored != computed {
        return Err(AnysegError::Checksum {
            what: "checkpoint".into(),
            stored,
            computed,
        });
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    cur.line()?;
    let meta = cur.line()?;
    let field = |key: &str| -> Result<usize> {
        meta.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AnysegError::Format(format!("checkpoint header lacks `{key}`")))
    };
    let frozen = field("frozen")? == 1;
    let (height, width, count) = (field("height")?, field("width")?, field("tensors")?);

    let mut records: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| AnysegError::Format("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()?;
        let dims: Vec<usize> = (0..rank).map(|_| cur.u32()).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| AnysegError::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| AnysegError::Format(format!("tensor {name}: {e}")))?;
        records.push((name, t));
    }
    if cur.pos != body.len() {
        return Err(AnysegError::Format("trailing bytes after last tensor".into()));
    }

    let lookup = |name: &str| -> Result<&Tensor<f32>> {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| AnysegError::Format(format!("checkpoint lacks tensor `{name}`")))
    };
    let cols = |name: &str| -> Result<usize> {
        let t = lookup(name)?;
        (t.rank() == 2)
            .then(|| t.shape()[1])
            .ok_or_else(|| AnysegError::Format(format!("tensor `{name}` must be a matrix")))
    };
    let mut stage_channels = [0; NUM_STAGES];
    for (i, c) in stage_channels.iter_mut().enumerate() {
        *c = cols(&format!("stage{}.weight", i + 1))?;
    }
    let shape = ModelShape {
        height,
        width,
        num_classes: cols("classifier.weight")?,
        stage_channels,
        decoder_channels: cols("decoder1.weight")?,
    };
    let mut params = SegmentorParams::<f32>::init(&shape, 0).map_err(|e| AnysegError::Format(e.to_string()))?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != records.len() {
        return Err(AnysegError::Format(format!(
            "expected {} tensors, found {}",
            names.len(),
            records.len()
        )));
    }
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = lookup(name)?;
        if t.shape() != slot.shape() {
            return Err(AnysegError::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    params.set_frozen(frozen);
    Ok(params)
}
