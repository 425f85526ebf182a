//! `CW3D0001` weight checkpoints.
//!
//! Layout (little-endian): magic, `u32` block count, then per block a `u32`
//! name length, the UTF-8 name, `u32` rank, `rank` x `u32` dims, and the
//! `f32` values. Optimizer accumulators follow the parameters as ordinary
//! blocks named `<param>.Eg2` / `<param>.Edx2`; the count covers them too.

use std::fs;
use std::path::Path;

use super::adadelta::{Accumulators, Adadelta};
use super::tensor::Param;
use super::Real;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CW3D0001";
pub const EG2_SUFFIX: &str = ".Eg2";
pub const EDX2_SUFFIX: &str = ".Edx2";

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Block {
    pub fn from_slice<T: Real>(name: impl Into<String>, dims: &[usize], values: &[T]) -> Self {
        Block {
            name: name.into(),
            dims: dims.to_vec(),
            values: values.iter().map(|v| v.to_f64c() as f32).collect(),
        }
    }
}

pub fn encode(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in &b.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &b.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<Block>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err("bad magic, expected CW3D0001".into());
    }
    let count = cur.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| "block name is not UTF-8".to_string())?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or("block too large")?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(Block { name, dims, values });
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(blocks)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write(path: impl AsRef<Path>, blocks: &[Block]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(blocks)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<Block>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}

/// Parameter blocks followed by the optimizer accumulators, if any.
pub fn collect_blocks<T: Real>(params: &[&Param<T>], optimizer: Option<&Adadelta<T>>) -> Vec<Block> {
    let mut blocks: Vec<Block> = params
        .iter()
        .map(|p| Block::from_slice(p.name.clone(), &p.shape, &p.value))
        .collect();
    if let Some(opt) = optimizer {
        for (acc, p) in opt.state.iter().zip(params) {
            blocks.push(Block::from_slice(format!("{}{EG2_SUFFIX}", acc.name), &p.shape, &acc.eg2));
            blocks.push(Block::from_slice(format!("{}{EDX2_SUFFIX}", acc.name), &p.shape, &acc.edx2));
        }
    }
    blocks
}

/// Copies checkpoint values into `params` (matched by name and shape) and
/// rebuilds optimizer accumulators when they are present.
pub fn restore<T: Real>(blocks: &[Block], params: &mut [&mut Param<T>]) -> Result<Option<Vec<Accumulators<T>>>> {
    let find = |name: &str| blocks.iter().find(|b| b.name == name);
    for p in params.iter_mut() {
        let b = find(&p.name).ok_or_else(|| Error::Shape(format!("checkpoint has no block {}", p.name)))?;
        if b.dims != p.shape {
            return Err(Error::Shape(format!(
                "block {} has dims {:?}, model expects {:?}",
                p.name, b.dims, p.shape
            )));
        }
        for (dst, &src) in p.value.iter_mut().zip(&b.values) {
            *dst = T::from_f64c(src as f64);
        }
    }
    let mut accs = Vec::with_capacity(params.len());
    for p in params.iter() {
        let eg2 = find(&format!("{}{EG2_SUFFIX}", p.name));
        let edx2 = find(&format!("{}{EDX2_SUFFIX}", p.name));
        match (eg2, edx2) {
            (Some(a), Some(b)) if a.values.len() == p.len() && b.values.len() == p.len() => {
                accs.push(Accumulators {
                    name: p.name.clone(),
                    eg2: a.values.iter().map(|&v| T::from_f64c(v as f64)).collect(),
                    edx2: b.values.iter().map(|&v| T::from_f64c(v as f64)).collect(),
                });
            }
            (None, None) => return Ok(None),
            _ => {
                return Err(Error::Shape(format!(
                    "incomplete optimizer state for block {}",
                    p.name
                )))
            }
        }
    }
    Ok(Some(accs))
}
