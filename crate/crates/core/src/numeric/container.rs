//! Named-tensor container used for checkpoints, feature dumps and posterior dumps.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "NTC\0" | version
//! repeated until EOF:
//!   name_len | name (UTF-8) | rank | dims[rank] | f32 LE data[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NTC\0";
pub const VERSION: u32 = 1;

/// A tensor of rank ≤ 2 stored as an `f32` matrix plus its declared dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn scalar(v: f32) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f32>) -> Self {
        Self {
            dims: vec![v.len()],
            data: v,
        }
    }

    pub fn from_matrix(m: &Matrix<f32>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    /// Interprets rank 0/1 as a single row.
    pub fn to_matrix(&self) -> Result<Matrix<f32>> {
        let (rows, cols) = match self.dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Format(format!(
                    "rank {} tensor cannot be viewed as a matrix",
                    self.dims.len()
                )))
            }
        };
        Matrix::new(rows, cols, self.data.clone())
    }
}

/// Ordered collection of named tensors. Insertion order is preserved on write.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.entries.push((name, t));
        }
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix<f32>) {
        self.insert(name, Tensor::from_matrix(m));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix<f32>> {
        self.require(name)?.to_matrix()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().cloned().collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, t) in &self.entries {
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() {
                return Err(Error::Format(format!(
                    "tensor `{name}` dims {:?} do not match {} values",
                    t.dims,
                    t.data.len()
                )));
            }
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.dims.len())?;
            for &d in &t.dims {
                write_u32(w, d)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?.ok_or_else(|| Error::Format("truncated header".into()))?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut out = Container::new();
        while let Some(name_len) = read_u32(&mut r)? {
            let name_bytes = take(&mut r, name_len)?;
            let name = String::from_utf8(name_bytes.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)?.ok_or_else(|| truncated(&name))?;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r)?.ok_or_else(|| truncated(&name))?);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` too large")))?;
            let raw = take(&mut r, count.checked_mul(4).ok_or_else(|| truncated(&name))?)
                .map_err(|_| truncated(&name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.entries.push((name, Tensor { dims, data }));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn truncated(name: &str) -> Error {
    Error::Format(format!("truncated record `{name}`"))
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// `None` at clean EOF.
fn read_u32(r: &mut &[u8]) -> Result<Option<usize>> {
    if r.is_empty() {
        return Ok(None);
    }
    if r.len() < 4 {
        return Err(Error::Format("truncated integer".into()));
    }
    let v = u32::from_le_bytes([r[0], r[1], r[2], r[3]]);
    *r = &r[4..];
    Ok(Some(v as usize))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated payload".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
