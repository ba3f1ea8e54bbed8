//! A minimal binary container for named `f64` tensors.
//!
//! Used for model weights, the dataset cache, and per-algorithm attack
//! archives. Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "SIBW"
//! version u32      currently 1
//! count   u32      number of tensors
//! then per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   rank     u8,  extents u32 * rank
//!   data     f64 * product(extents)
//! ```
//!
//! Writes are deterministic: tensors are stored in the order given, and the
//! encoding has no timestamps or padding, so identical inputs produce
//! byte-identical files.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SIBW";
pub const VERSION: u32 = 1;

/// Refuse to allocate containers claiming more elements than this; guards
/// against corrupt headers, not legitimate use (desk-scale data is ~1e6).
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"SIBW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("container has {0} trailing bytes after the last tensor")]
    TrailingData(usize),
    #[error("tensor name of {0} bytes exceeds the u16 limit")]
    NameTooLong(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?} claims {elements} elements, over the sanity limit")]
    TooLarge { name: String, elements: u64 },
    #[error("container is missing required tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    WrongShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

pub fn write_container_bytes(tensors: &[NamedTensor]) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut seen: Vec<&str> = Vec::new();
    for nt in tensors {
        if seen.contains(&nt.name.as_str()) {
            return Err(ContainerError::DuplicateName(nt.name.clone()));
        }
        seen.push(&nt.name);
        let name = nt.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(ContainerError::NameTooLong(name.len()));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = nt.tensor.shape();
        out.push(shape.len() as u8);
        for &ext in shape {
            out.extend_from_slice(&(ext as u32).to_le_bytes());
        }
        for &v in nt.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_container_bytes(bytes: &[u8]) -> Result<Vec<NamedTensor>, ContainerError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take::<4>("magic")?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(cur.take::<4>("version")?);
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(cur.take::<4>("tensor count")?);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take::<2>("name length")?) as usize;
        let name_bytes = cur.take_slice(name_len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| ContainerError::BadName)?;
        if tensors.iter().any(|t: &NamedTensor| t.name == name) {
            return Err(ContainerError::DuplicateName(name));
        }
        let rank = cur.take::<1>("rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let ext = u32::from_le_bytes(cur.take::<4>("extent")?) as u64;
            elements = elements.saturating_mul(ext);
            shape.push(ext as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(ContainerError::TooLarge { name, elements });
        }
        let raw = cur.take_slice(elements as usize * 8, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::from_vec(shape, data).expect("element count follows from extents");
        tensors.push(NamedTensor { name, tensor });
    }
    if cur.pos != bytes.len() {
        return Err(ContainerError::TrailingData(bytes.len() - cur.pos));
    }
    Ok(tensors)
}

pub fn write_container(path: &Path, tensors: &[NamedTensor]) -> Result<(), ContainerError> {
    let bytes = write_container_bytes(tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<NamedTensor>, ContainerError> {
    let bytes = fs::read(path)?;
    read_container_bytes(&bytes)
}

/// Looks up a tensor by name.
pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Option<&'a Tensor> {
    tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
}

/// Looks up a tensor by name, as an error if absent.
pub fn require<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a Tensor, ContainerError> {
    find(tensors, name).ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
}

/// Looks up a tensor and checks its shape.
pub fn require_shaped<'a>(
    tensors: &'a [NamedTensor],
    name: &str,
    shape: &[usize],
) -> Result<&'a Tensor, ContainerError> {
    let t = require(tensors, name)?;
    if t.shape() != shape {
        return Err(ContainerError::WrongShape {
            name: name.to_string(),
            got: t.shape().to_vec(),
            expected: shape.to_vec(),
        });
    }
    Ok(t)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], ContainerError> {
        let slice = self.take_slice(N, what)?;
        Ok(slice.try_into().expect("length checked"))
    }

    fn take_slice(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
