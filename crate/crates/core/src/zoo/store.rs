//! Binary persistence for surrogate models.
//!
//! Layout: magic, format version, metadata strings, layer list with raw
//! little-endian `f64` parameters, then a SHA-256 digest of everything
//! before it. Loading verifies the digest before trusting any field.

use super::train::{ModelBank, SurrogateModel};
use crate::graph::{ComputationGraph, Layer, Padding};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"ATFM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: not a model file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: format version {found} unsupported (expected {VERSION})")]
    VersionMismatch { path: String, found: u32 },
    #[error("{path}: checksum failure (file corrupted)")]
    ChecksumFailure { path: String },
    #[error("{path}: truncated or malformed at byte {offset}")]
    Malformed { path: String, offset: usize },
    #[error("{path}: unknown layer tag {tag}")]
    UnknownLayer { path: String, tag: u8 },
    #[error("model reconstruction failed: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn err(&self) -> StoreError {
        StoreError::Malformed {
            path: self.path.clone(),
            offset: self.at,
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.at + n > self.bytes.len() {
            return Err(self.err());
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, StoreError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }
    fn str(&mut self) -> Result<String, StoreError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(self.err());
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err())
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>, StoreError> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

fn encode(model: &SurrogateModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&model.id);
    w.str(&model.training_tag);
    w.u32(model.input_shape.len() as u32);
    for &d in &model.input_shape {
        w.u32(d as u32);
    }
    w.u32(model.num_classes as u32);
    w.u32(model.graph.layers().len() as u32);
    for layer in model.graph.layers() {
        match layer {
            Layer::Dense { weights, bias } => {
                w.u8(1);
                w.u32(weights.shape()[0] as u32);
                w.u32(weights.shape()[1] as u32);
                w.floats(weights.data());
                w.floats(bias.data());
            }
            Layer::Conv2d {
                kernels,
                bias,
                padding,
            } => {
                w.u8(2);
                for &d in kernels.shape() {
                    w.u32(d as u32);
                }
                w.u8(match padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                });
                w.floats(kernels.data());
                w.floats(bias.data());
            }
            Layer::Relu => w.u8(3),
            Layer::MaxPool2x2 => w.u8(4),
            Layer::Flatten => w.u8(5),
            Layer::Softmax => w.u8(6),
        }
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn save_model(model: &SurrogateModel, path: &Path) -> Result<(), StoreError> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SurrogateModel, StoreError> {
    let bytes = fs::read(path)?;
    let pathstr = path.display().to_string();
    if bytes.len() < 4 + 4 + 32 {
        return Err(StoreError::Malformed {
            path: pathstr,
            offset: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic { path: pathstr });
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(StoreError::VersionMismatch {
            path: pathstr,
            found: version,
        });
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(StoreError::ChecksumFailure { path: pathstr });
    }

    let mut r = Reader {
        bytes: payload,
        at: 8,
        path: pathstr.clone(),
    };
    let id = r.str()?;
    let training_tag = r.str()?;
    let rank = r.u32()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let num_classes = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let layer = match tag {
            1 => {
                let out = r.u32()? as usize;
                let inp = r.u32()? as usize;
                let weights = Tensor::new(r.floats(out * inp)?, vec![out, inp])
                    .map_err(|_| r.err())?;
                let bias = Tensor::new(r.floats(out)?, vec![out]).map_err(|_| r.err())?;
                Layer::Dense { weights, bias }
            }
            2 => {
                let oc = r.u32()? as usize;
                let ic = r.u32()? as usize;
                let kh = r.u32()? as usize;
                let kw = r.u32()? as usize;
                let padding = match r.u8()? {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    _ => return Err(r.err()),
                };
                let kernels = Tensor::new(r.floats(oc * ic * kh * kw)?, vec![oc, ic, kh, kw])
                    .map_err(|_| r.err())?;
                let bias = Tensor::new(r.floats(oc)?, vec![oc]).map_err(|_| r.err())?;
                Layer::Conv2d {
                    kernels,
                    bias,
                    padding,
                }
            }
            3 => Layer::Relu,
            4 => Layer::MaxPool2x2,
            5 => Layer::Flatten,
            6 => Layer::Softmax,
            tag => {
                return Err(StoreError::UnknownLayer {
                    path: pathstr,
                    tag,
                })
            }
        };
        layers.push(layer);
    }
    if r.at != payload.len() {
        return Err(r.err());
    }
    let graph = ComputationGraph::new(input_shape.clone(), layers)?;
    Ok(SurrogateModel {
        id,
        graph,
        input_shape,
        num_classes,
        training_tag,
    })
}

/// Writes each member to `dir/<index>-<id>.atfm`; the index prefix preserves
/// bank order on reload.
pub fn save_bank(bank: &ModelBank, dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir)?;
    for (i, m) in bank.members.iter().enumerate() {
        save_model(m, &dir.join(format!("{i:02}-{}.atfm", m.id)))?;
    }
    Ok(())
}

pub fn load_bank(dir: &Path) -> Result<ModelBank, StoreError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "atfm"))
        .collect();
    paths.sort();
    let mut members = Vec::with_capacity(paths.len());
    for p in paths {
        members.push(load_model(&p)?);
    }
    Ok(ModelBank { members })
}
