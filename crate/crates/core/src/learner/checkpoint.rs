//! CKPT0001: a model snapshot with its training counters.
//!
//! ```text
//! magic          8 bytes  "CKPT0001"
//! step           u64
//! examples_seen  u64
//! class count    u32, then that many u32 global class ids
//! tensor count   u32
//! manifest       per tensor: u16 name length, UTF-8 name, u32 ndim,
//!                ndim × u64 dims, u64 byte offset into the payload
//! payload        f32 tensors, row-major
//! ```
//!
//! All integers and floats are little-endian. Tensor names are
//! `enc.<i>.weight` (`out × in`), `enc.<i>.bias`, `dec.columns`
//! (`classes × d`), and optionally `span.start` and `span.end`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderParams, Dense, EncoderParams, Model, SpanDecoderParams};
use crate::embed::ByteReader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CKPT0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub examples_seen: u64,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.model.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.examples_seen.to_le_bytes());
        let ids = self.model.decoder.class_ids();
        out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        for id in ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, shape, data) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * data.len() as u64;
        }
        for (name, _, data) in &tensors {
            for &x in *data {
                let f = x as f32;
                if !f.is_finite() {
                    return Err(Error::Validation(format!(
                        "tensor {name} holds {x}, which does not fit in f32"
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 8] = r
            .array()
            .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a CKPT0001 checkpoint".into()));
        }
        let step = r.u64()?;
        let examples_seen = r.u64()?;
        let n_ids = r.u32()? as usize;
        r.ensure(n_ids.checked_mul(4))?;
        let ids = (0..n_ids).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n_tensors = r.u32()? as usize;
        let mut manifest = Vec::new();
        for _ in 0..n_tensors {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let ndim = r.u32()? as usize;
            r.ensure(ndim.checked_mul(8))?;
            let shape = (0..ndim)
                .map(|_| r.u64().and_then(to_usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = to_usize(r.u64()?)?;
            manifest.push((name, shape, offset));
        }
        let payload = r.take(r.remaining())?;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        let mut expected_offset = 0usize;
        for (name, shape, offset) in manifest {
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corruption(format!("tensor {name} is too large")))?;
            let end = count
                .checked_mul(4)
                .and_then(|b| offset.checked_add(b))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Corruption(format!("tensor {name} runs past the payload")))?;
            if offset != expected_offset {
                return Err(Error::Corruption(format!("tensor {name} has a bad offset")));
            }
            expected_offset = end;
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect::<Vec<_>>();
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::Validation(format!("tensor {name} has non-finite values")));
            }
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Format(format!("tensor {name} appears twice")));
            }
        }
        if expected_offset != payload.len() {
            return Err(Error::Corruption("trailing bytes after the last tensor".into()));
        }
        let model = assemble(ids, tensors)?;
        Ok(Checkpoint {
            step,
            examples_seen,
            model,
        })
    }
}

fn to_usize(x: u64) -> Result<usize> {
    usize::try_from(x).map_err(|_| Error::Corruption(format!("size {x} does not fit")))
}

fn assemble(ids: Vec<u32>, mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Model> {
    let mut take = |name: &str, ndim: usize| -> Result<Option<(Vec<usize>, Vec<f64>)>> {
        match tensors.remove(name) {
            Some((shape, _)) if shape.len() != ndim => Err(Error::Format(format!(
                "tensor {name} has {} dims, expected {ndim}",
                shape.len()
            ))),
            other => Ok(other),
        }
    };
    let mut layers = Vec::new();
    for i in 0.. {
        let Some((wshape, weight)) = take(&format!("enc.{i}.weight"), 2)? else {
            break;
        };
        let (bshape, bias) = take(&format!("enc.{i}.bias"), 1)?
            .ok_or_else(|| Error::Format(format!("missing tensor enc.{i}.bias")))?;
        if bshape[0] != wshape[0] {
            return Err(Error::dim(wshape[0], bshape[0]));
        }
        layers.push(Dense {
            inputs: wshape[1],
            outputs: wshape[0],
            weight,
            bias,
        });
    }
    let encoder = EncoderParams::from_layers(layers)?;
    let (cshape, columns) =
        take("dec.columns", 2)?.ok_or_else(|| Error::Format("missing tensor dec.columns".into()))?;
    if cshape[0] != ids.len() {
        return Err(Error::dim(ids.len(), cshape[0]));
    }
    let decoder = DecoderParams::from_columns(ids, cshape[1], columns)?;
    let span = match (take("span.start", 1)?, take("span.end", 1)?) {
        (Some((_, w_start)), Some((_, w_end))) => Some(SpanDecoderParams { w_start, w_end }),
        (None, None) => None,
        _ => return Err(Error::Format("span decoder is incomplete".into())),
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unknown tensor {name}")));
    }
    Model::new(encoder, decoder, span)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
