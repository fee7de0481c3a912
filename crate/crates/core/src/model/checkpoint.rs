use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"QKVAE\0";
pub const FORMAT_VERSION: u16 = 1;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
/// Raw bytes; used for the vocabulary (words joined by `\n`).
const TAG_BYTES: u8 = 2;
const VOCAB_ENTRY: &str = "vocab";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint entry {0}: {1}")]
    Corrupt(String, String),
    #[error("checkpoint lacks parameter {0}")]
    Missing(String),
    #[error("checkpoint parameter {0} has the wrong shape")]
    Shape(String),
    #[error("checkpoint vocabulary is missing or malformed")]
    Vocab,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything stored in a checkpoint file.
///
/// Layout (little-endian): magic, `u16` version, `u32` config count, then per
/// entry `u16` name length, name, `f64` value; `u32` tensor count, then per
/// tensor `u16` name length, name, `u8` dtype tag (0 f32, 1 f64, 2 bytes),
/// `u8` rank, `u32` dims, raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Vec<(String, f64)>,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub vocab: Vec<String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config_value(&self, name: &str) -> Option<f64> {
        self.config.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn set_config(&mut self, name: &str, value: f64) {
        match self.config.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = value,
            None => self.config.push((name.to_string(), value)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for (name, v) in &self.config {
            put_name(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32 + 1).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name);
            out.push(T::DTYPE_TAG);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        let vocab = self.vocab.join("\n");
        put_name(&mut out, VOCAB_ENTRY);
        out.push(TAG_BYTES);
        out.push(1);
        out.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
        out.extend_from_slice(vocab.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n_config = u32::from_le_bytes(r.array()?) as usize;
        let mut config = Vec::with_capacity(n_config.min(1 << 16));
        for _ in 0..n_config {
            let name = r.name()?;
            config.push((name, f64::from_le_bytes(r.array()?)));
        }
        let n_tensors = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors = Vec::new();
        let mut vocab = None;
        for _ in 0..n_tensors {
            let name = r.name()?;
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let numel: usize = shape.iter().product();
            let corrupt = |msg: &str| CheckpointError::Corrupt(name.clone(), msg.to_string());
            match tag {
                TAG_BYTES => {
                    let raw = r.take(numel)?;
                    let text = std::str::from_utf8(raw).map_err(|_| corrupt("invalid UTF-8"))?;
                    if name == VOCAB_ENTRY {
                        vocab = Some(text.split('\n').map(str::to_string).collect());
                    }
                }
                TAG_F32 | TAG_F64 => {
                    let width = if tag == TAG_F32 { 4 } else { 8 };
                    let raw = r.take(numel.checked_mul(width).ok_or_else(|| corrupt("size overflow"))?)?;
                    let data: Vec<T> = raw
                        .chunks_exact(width)
                        .map(|c| {
                            if tag == TAG_F32 {
                                T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                            } else {
                                T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            }
                        })
                        .collect();
                    let t = Tensor::new(&shape, data).map_err(|e| corrupt(&e.to_string()))?;
                    tensors.push((name, t));
                }
                other => return Err(corrupt(&format!("unknown dtype tag {other}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("<end>".into(), "trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            tensors,
            vocab: vocab.ok_or(CheckpointError::Vocab)?,
        })
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Corrupt("<name>".into(), "invalid UTF-8".into()))
    }
}

pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(&tmp, ck.to_bytes()).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
