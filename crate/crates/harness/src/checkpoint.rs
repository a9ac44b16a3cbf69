//! `MLB1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MLB1" | version u32 | entry count u32
//! per entry: name_len u32 | name (UTF-8) | dtype u8 | ndim u32 | dims u64 × ndim
//!            | offset u64 (from payload start) | byte length u64
//! payload: the arrays back to back
//! crc32 u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mergelab_core::{ParamSet, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLB1";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Array {
    fn shape(&self) -> &[usize] {
        match self {
            Array::F64 { shape, .. } | Array::U8 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Array::F64 { .. } => DTYPE_F64,
            Array::U8 { .. } => DTYPE_U8,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Array::F64 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Array::U8 { data, .. } => data.clone(),
        }
    }

    /// Bit-exact equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &Array) -> bool {
        self.dtype() == other.dtype() && self.shape() == other.shape() && self.bytes() == other.bytes()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Array>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return corrupt("truncated checkpoint");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.entries.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no entry `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert(
            name,
            Array::F64 {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn insert_u8(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) {
        self.insert(name, Array::U8 { shape, data });
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.get(name)? {
            Array::F64 { shape, data } => Ok(Tensor::new(shape.clone(), data.clone())?),
            Array::U8 { .. } => corrupt(format!("entry `{name}` is not f64")),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name)? {
            Array::U8 { shape, data } => Ok((shape, data)),
            Array::F64 { .. } => corrupt(format!("entry `{name}` is not u8")),
        }
    }

    /// Stores every tensor of `params` under `prefix`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for (n, t) in params.iter() {
            self.insert_tensor(format!("{prefix}{n}"), t);
        }
    }

    /// All f64 entries under `prefix`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (n, a) in self.entries.range(prefix.to_string()..) {
            let Some(rest) = n.strip_prefix(prefix) else { break };
            if let Array::F64 { shape, data } = a {
                out.insert(rest, Tensor::new(shape.clone(), data.clone())?);
            }
        }
        Ok(out)
    }

    pub fn from_params(params: &ParamSet) -> Self {
        let mut c = Self::new();
        c.insert_params("", params);
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, a) in &self.entries {
            let bytes = a.bytes();
            head.extend_from_slice(&(name.len() as u32).to_le_bytes());
            head.extend_from_slice(name.as_bytes());
            head.push(a.dtype());
            head.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                head.extend_from_slice(&(d as u64).to_le_bytes());
            }
            head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            head.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            payload.extend_from_slice(&bytes);
        }
        head.extend_from_slice(&payload);
        let crc = crc32fast::hash(&head);
        head.extend_from_slice(&crc.to_le_bytes());
        head
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 {
            return corrupt("checkpoint too short");
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return corrupt(format!("CRC mismatch (stored {stored:08x}, computed {actual:08x})"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return corrupt("bad magic, not an MLB1 checkpoint");
        }
        let version = r.u32()?;
        if version != VERSION {
            return corrupt(format!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let nbytes = r.u64()? as usize;
            manifest.push((name, dtype, shape, offset, nbytes));
        }
        let payload = &body[r.pos..];
        let mut entries = BTreeMap::new();
        for (name, dtype, shape, offset, nbytes) in manifest {
            let numel: usize = shape.iter().product();
            let width = match dtype {
                DTYPE_F64 => 8,
                DTYPE_U8 => 1,
                d => return corrupt(format!("entry `{name}` has unknown dtype {d}")),
            };
            if numel * width != nbytes || offset.checked_add(nbytes).is_none_or(|e| e > payload.len()) {
                return corrupt(format!("entry `{name}` does not fit the payload"));
            }
            let raw = &payload[offset..offset + nbytes];
            let array = if dtype == DTYPE_F64 {
                Array::F64 {
                    shape,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                }
            } else {
                Array::U8 {
                    shape,
                    data: raw.to_vec(),
                }
            };
            entries.insert(name, array);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
