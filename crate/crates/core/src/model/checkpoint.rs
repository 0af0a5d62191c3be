//! Binary checkpoint files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes   "SRMC"
//! version    u32       1
//! kind       u8 len, then UTF-8 bytes ("srmil" or "abmil")
//! dims       u32 count, then count × u64
//! tensors    u32 count, then per tensor:
//!              u16 name length, UTF-8 name
//!              u8 rank, rank × u64 extents
//!              numel × f64 values
//! ```
//!
//! Tensors appear in the model's parameter traversal order. Values are
//! written bit-for-bit, so a save/load round trip is exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::abmil::{AbmilDims, AbmilState};
use super::params::{ModelDims, ModelState, Parameterized};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model that can be rebuilt from its recorded dimensions.
pub trait Checkpointable: Parameterized + Sized {
    const KIND: &'static str;
    fn dims_record(&self) -> Vec<u64>;
    fn from_dims_record(dims: &[u64]) -> Result<Self>;
}

fn dims_from(record: &[u64], expected: usize) -> Result<Vec<usize>> {
    if record.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint records {} dimensions, expected {expected}",
            record.len()
        )));
    }
    record
        .iter()
        .map(|&v| usize::try_from(v).map_err(|_| Error::Config(format!("dimension {v} too large"))))
        .collect()
}

impl Checkpointable for ModelState {
    const KIND: &'static str = "srmil";

    fn dims_record(&self) -> Vec<u64> {
        let d = &self.dims;
        [d.input_dim, d.hidden, d.heads, d.layers, d.classes, d.classifier_hidden]
            .iter()
            .map(|&v| v as u64)
            .collect()
    }

    fn from_dims_record(record: &[u64]) -> Result<Self> {
        let v = dims_from(record, 6)?;
        ModelState::init(
            ModelDims {
                input_dim: v[0],
                hidden: v[1],
                heads: v[2],
                layers: v[3],
                classes: v[4],
                classifier_hidden: v[5],
            },
            0,
        )
    }
}

impl Checkpointable for AbmilState {
    const KIND: &'static str = "abmil";

    fn dims_record(&self) -> Vec<u64> {
        let d = &self.dims;
        [d.input_dim, d.hidden, d.attention_dim, d.classes]
            .iter()
            .map(|&v| v as u64)
            .collect()
    }

    fn from_dims_record(record: &[u64]) -> Result<Self> {
        let v = dims_from(record, 4)?;
        AbmilState::init(
            AbmilDims {
                input_dim: v[0],
                hidden: v[1],
                attention_dim: v[2],
                classes: v[3],
            },
            0,
        )
    }
}

pub fn encode_checkpoint<M: Checkpointable>(model: &M) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(M::KIND.len() as u8);
    out.extend_from_slice(M::KIND.as_bytes());
    let dims = model.dims_record();
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    let mut tensors = Vec::new();
    model.visit_params(&mut |name, _, t| tensors.push((name.to_string(), t.clone())));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &s in t.shape() {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated while reading {what}"))),
        }
    }

    fn fail(&self, detail: String) -> Error {
        Error::Format {
            offset: self.pos,
            detail,
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start,
            detail: format!("{what} is not UTF-8"),
        })
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<String> {
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a checkpoint file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let kind_len = r.u8("kind length")? as usize;
    r.string(kind_len, "kind")
}

/// The model kind recorded in a checkpoint header.
pub fn checkpoint_kind(bytes: &[u8]) -> Result<String> {
    read_header(&mut Reader { bytes, pos: 0 })
}

pub fn decode_checkpoint<M: Checkpointable>(bytes: &[u8]) -> Result<M> {
    let mut r = Reader { bytes, pos: 0 };
    let kind = read_header(&mut r)?;
    if kind != M::KIND {
        return Err(Error::Config(format!("checkpoint holds a {kind} model, expected {}", M::KIND)));
    }
    let n_dims = r.u32("dimension count")? as usize;
    let dims = (0..n_dims).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
    let mut model = M::from_dims_record(&dims)?;
    let count = r.u32("tensor count")? as usize;
    let mut expected = 0;
    model.visit_params(&mut |_, _, _| expected += 1);
    if count != expected {
        return Err(r.fail(format!("{count} tensors, model has {expected}")));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| r.fail(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.saturating_mul(8), "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut slots = loaded.into_iter();
    let mut failure = None;
    model.visit_params_mut(&mut |name, _, t| {
        if failure.is_some() {
            return;
        }
        let (got_name, value) = slots.next().expect("count checked");
        if got_name != name || value.shape() != t.shape() {
            failure = Some(Error::Config(format!(
                "checkpoint tensor {got_name} {:?} does not match model tensor {name} {:?}",
                value.shape(),
                t.shape()
            )));
        } else if !value.is_finite() {
            failure = Some(Error::NonFinite(format!("checkpoint tensor {name}")));
        } else {
            *t = value;
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

pub fn save_checkpoint<M: Checkpointable>(model: &M, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<M: Checkpointable>(path: &Path) -> Result<M> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
