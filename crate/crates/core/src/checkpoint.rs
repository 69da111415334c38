//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MOEG"  u32 version  u32 entry_count
//! per entry: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, payload
//! ```
//!
//! The payload is always `product(dims)` 32-bit words. Float tensors store
//! `f32` bit patterns; integer arrays (RNG state, counters) store each `u64`
//! as a low/high word pair with a trailing dimension of 2; text is stored as
//! a byte-length word followed by the bytes packed four per word.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MOEG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub dims: Vec<u32>,
    pub words: Vec<u32>,
}

/// Named entries, kept in sorted order so serialization is canonical.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| bad(format!("missing entry {name:?}")))
    }

    pub fn insert_raw(&mut self, name: &str, entry: Entry) -> Result<()> {
        if name.len() > u16::MAX as usize {
            return Err(bad("entry name too long"));
        }
        if entry.dims.len() > u8::MAX as usize {
            return Err(bad(format!("{name}: rank too large")));
        }
        let numel: u64 = entry.dims.iter().map(|&d| d as u64).product();
        if numel != entry.words.len() as u64 {
            return Err(bad(format!("{name}: dims {:?} do not match {} words", entry.dims, entry.words.len())));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    /// Stores a tensor as `f32` bit patterns.
    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let dims = t
            .shape()
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| bad(format!("{name}: dimension too large"))))
            .collect::<Result<Vec<_>>>()?;
        let words = t.data().iter().map(|v| (v.as_f64() as f32).to_bits()).collect();
        self.insert_raw(name, Entry { dims, words })
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let shape = e.dims.iter().map(|&d| d as usize).collect();
        let data = e.words.iter().map(|&w| T::of_f64(f32::from_bits(w) as f64)).collect();
        Ok(Tensor::new(shape, data)?)
    }

    /// Loads a tensor and checks it against an expected shape.
    pub fn tensor_shaped<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(bad(format!("{name}: expected shape {shape:?}, found {:?}", t.shape())));
        }
        Ok(t)
    }

    pub fn put_u64s(&mut self, name: &str, values: &[u64]) -> Result<()> {
        let words = values.iter().flat_map(|&v| [v as u32, (v >> 32) as u32]).collect();
        let n = u32::try_from(values.len()).map_err(|_| bad("array too long"))?;
        self.insert_raw(name, Entry { dims: vec![n, 2], words })
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let e = self.entry(name)?;
        if e.dims.len() != 2 || e.dims[1] != 2 {
            return Err(bad(format!("{name}: not an integer array (dims {:?})", e.dims)));
        }
        Ok(e.words.chunks(2).map(|p| p[0] as u64 | (p[1] as u64) << 32).collect())
    }

    pub fn put_u64(&mut self, name: &str, value: u64) -> Result<()> {
        self.put_u64s(name, &[value])
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)?.as_slice() {
            [v] => Ok(*v),
            other => Err(bad(format!("{name}: expected one integer, found {}", other.len()))),
        }
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let bits: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        self.put_u64s(name, &bits)
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.u64s(name)?.into_iter().map(f64::from_bits).collect())
    }

    pub fn put_text(&mut self, name: &str, text: &str) -> Result<()> {
        let bytes = text.as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| bad("text too long"))?;
        let mut words = vec![len];
        words.extend(bytes.chunks(4).map(|c| {
            let mut b = [0u8; 4];
            b[..c.len()].copy_from_slice(c);
            u32::from_le_bytes(b)
        }));
        let n = words.len() as u32;
        self.insert_raw(name, Entry { dims: vec![n], words })
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let e = self.entry(name)?;
        let (&len, rest) = e.words.split_first().ok_or_else(|| bad(format!("{name}: empty text entry")))?;
        let bytes: Vec<u8> = rest.iter().flat_map(|w| w.to_le_bytes()).collect();
        let len = len as usize;
        if len > bytes.len() {
            return Err(bad(format!("{name}: text length {len} exceeds payload")));
        }
        String::from_utf8(bytes[..len].to_vec()).map_err(|_| bad(format!("{name}: text is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for w in &e.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("unexpected end of data"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32_at(take(4)?);
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let rank = take(1)?[0] as usize;
            let dims: Vec<u32> = (0..rank).map(|_| take(4).map(u32_at)).collect::<Result<_>>()?;
            let numel: u64 = dims.iter().map(|&d| d as u64).product();
            let nbytes = usize::try_from(numel.saturating_mul(4)).map_err(|_| bad("entry too large"))?;
            let words = take(nbytes)?.chunks(4).map(u32_at).collect();
            if ckpt.entries.contains_key(&name) {
                return Err(bad(format!("duplicate entry {name:?}")));
            }
            ckpt.insert_raw(&name, Entry { dims, words })?;
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
