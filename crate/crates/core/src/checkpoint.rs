//! Binary checkpoints.
//!
//! Layout (little-endian): magic `"GTRC"`, `u32` version (1), `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8` dtype
//! (0 = f32, 1 = f64), a `u8` rank, `rank × u64` dims and the row-major
//! payload.
//!
//! Model checkpoints hold every parameter under its store name plus three
//! metadata tensors: `meta.config` and `meta.vocab` (UTF-8 bytes, one f32
//! per byte) and `meta.step` (one f64).

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{GtrError, Result};
use crate::model::Gtr;
use crate::tensor::{DType, Element, Tensor};
use crate::text::{Vocab, UNK};

pub const GTRC_MAGIC: &[u8; 4] = b"GTRC";
pub const GTRC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn to<E: Element>(&self) -> Tensor<E> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn of<E: Element>(t: &Tensor<E>) -> Self {
        match E::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(GTRC_MAGIC);
        out.extend_from_slice(&GTRC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| GtrError::contract(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| GtrError::contract(format!("rank of {name} exceeds 255")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype() as u8);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            t.write_payload(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != GTRC_MAGIC {
            return Err(GtrError::Format {
                offset: 0,
                msg: "bad GTRC magic".into(),
            });
        }
        let version = r.u32()?;
        if version != GTRC_VERSION {
            return Err(GtrError::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| GtrError::Format {
                    offset: at as u64,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let at = r.pos;
            let dtype = DType::from_byte(r.take(1)?[0]).ok_or_else(|| GtrError::Format {
                offset: at as u64,
                msg: format!("unknown dtype for {name}"),
            })?;
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let at = r.pos;
            let nbytes = shape
                .iter()
                .try_fold(dtype.size(), |a, &d| a.checked_mul(d))
                .ok_or_else(|| GtrError::Format {
                    offset: at as u64,
                    msg: format!("dims of {name} overflow"),
                })?;
            let payload = r.take(nbytes)?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(
                    shape,
                    payload.chunks_exact(4).map(f32::read_le).collect(),
                )?),
                DType::F64 => StoredTensor::F64(Tensor::new(
                    shape,
                    payload.chunks_exact(8).map(f64::read_le).collect(),
                )?),
            };
            ck.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(GtrError::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after last tensor".into(),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(GtrError::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn text_tensor(s: &str) -> StoredTensor {
    let bytes: Vec<f32> = s.bytes().map(f32::from).collect();
    StoredTensor::F32(Tensor::new(vec![bytes.len()], bytes).expect("1-D"))
}

fn tensor_text(t: &StoredTensor, what: &str) -> Result<String> {
    let bytes: Vec<u8> = t
        .to::<f64>()
        .data()
        .iter()
        .map(|&v| u8::try_from(v as i64).ok().filter(|_| v.fract() == 0.0))
        .collect::<Option<_>>()
        .ok_or_else(|| GtrError::contract(format!("{what} is not a byte string")))?;
    String::from_utf8(bytes).map_err(|_| GtrError::contract(format!("{what} is not UTF-8")))
}

/// Snapshot of a model's parameters plus config, vocabulary and step.
pub fn model_checkpoint<E: Element>(model: &Gtr<E>, step: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    for e in model.store.entries() {
        ck.push(e.name.clone(), StoredTensor::of(&e.tensor));
    }
    ck.push("meta.config", text_tensor(&model.cfg.to_text()));
    let words: Vec<&str> = (1..model.vocab.len())
        .filter_map(|i| model.vocab.word(i))
        .collect();
    ck.push("meta.vocab", text_tensor(&words.join("\n")));
    ck.push(
        "meta.step",
        StoredTensor::F64(Tensor::from_f64(&[1], &[step as f64])?),
    );
    Ok(ck)
}

/// Rebuild a model from a checkpoint. Every parameter must be present with
/// its exact shape.
pub fn restore_model<E: Element>(ck: &Checkpoint) -> Result<(Gtr<E>, u64)> {
    let meta = |name: &str| {
        ck.get(name)
            .ok_or_else(|| GtrError::contract(format!("checkpoint lacks {name}")))
    };
    let cfg = ModelConfig::parse(&tensor_text(meta("meta.config")?, "meta.config")?)?;
    let vocab_text = tensor_text(meta("meta.vocab")?, "meta.vocab")?;
    let words: Vec<&str> = vocab_text
        .split('\n')
        .filter(|w| !w.is_empty() && *w != UNK)
        .collect();
    let step = meta("meta.step")?
        .to::<f64>()
        .data()
        .first()
        .copied()
        .unwrap_or(0.0) as u64;
    let mut model = Gtr::<E>::build(&cfg, Vocab::new(&words))?;
    let names: Vec<String> = model
        .store
        .entries()
        .iter()
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        let t = ck
            .get(&name)
            .ok_or_else(|| GtrError::contract(format!("checkpoint lacks parameter {name}")))?;
        model.store.assign(&name, t.to())?;
    }
    Ok((model, step))
}

pub fn save_model<E: Element>(path: &Path, model: &Gtr<E>, step: u64) -> Result<()> {
    model_checkpoint(model, step)?.save(path)
}

pub fn load_model<E: Element>(path: &Path) -> Result<(Gtr<E>, u64)> {
    restore_model(&Checkpoint::load(path)?)
}
