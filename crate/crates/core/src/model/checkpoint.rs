//! Binary container for named tensors.
//!
//! Layout, all integers little-endian: the magic `DFCA`, a `u32` version, a
//! `u32` entry count, then per entry a `u32` name length with the UTF-8 name,
//! a `u32` rank, `u64` extents, a `u8` dtype tag (0 = f32, 1 = f64) and the raw
//! little-endian values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DFCA";
pub const VERSION: u32 = 1;

/// Prefix of entries that hold optimizer state rather than model tensors.
pub const OPTIMIZER_PREFIX: &str = "adam.";

/// Values of one entry in the dtype they were stored with.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl EntryData {
    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => EntryData::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            DType::F64 => EntryData::F64(t.data().iter().map(|v| v.to_f64().unwrap()).collect()),
        }
    }

    fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match self {
            EntryData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: EntryData::from_tensor(t),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(&self.shape, self.data.to_vec())
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

/// How tensors are matched when loading into a parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadMode {
    /// Every store tensor must be present with the same shape, and nothing else may be.
    Strict,
    /// Load tensors whose name starts with one of the prefixes (all names when
    /// empty) and whose shape agrees; everything else is skipped.
    Transfer { prefixes: Vec<String> },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store tensors left at their current values.
    pub skipped: Vec<String>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        Checkpoint {
            entries: store.iter().map(|(_, e)| Entry::from_tensor(&e.name, &e.value)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry::from_tensor(name, t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(e.data.dtype().tag());
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                EntryData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: element count overflow")))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype {tag}")))?;
            let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = match dtype {
                DType::F32 => EntryData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => EntryData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copies matching entries into `store`.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, mode: &LoadMode) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
        if *mode == LoadMode::Strict {
            for e in &self.entries {
                if !e.name.starts_with(OPTIMIZER_PREFIX) && store.id(&e.name).is_none() {
                    return Err(Error::Checkpoint(format!("unexpected tensor {}", e.name)));
                }
            }
        }
        for (id, name) in ids {
            let shape = store.get(id).shape().to_vec();
            let entry = self.get(&name);
            match mode {
                LoadMode::Strict => {
                    let e = entry.ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                    if e.shape != shape {
                        return Err(Error::Checkpoint(format!(
                            "{name}: checkpoint shape {:?} does not match model shape {shape:?}",
                            e.shape
                        )));
                    }
                    store.set(id, e.to_tensor()?)?;
                    report.loaded.push(name);
                }
                LoadMode::Transfer { prefixes } => {
                    let wanted = prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p.as_str()));
                    match entry {
                        Some(e) if wanted && e.shape == shape => {
                            store.set(id, e.to_tensor()?)?;
                            report.loaded.push(name);
                        }
                        _ => report.skipped.push(name),
                    }
                }
            }
        }
        Ok(report)
    }
}

/// Trainable scalars plus buffers, by kind, for reporting.
pub fn count_by_kind<T: Scalar>(store: &ParamStore<T>, kind: ParamKind) -> usize {
    store.iter().filter(|(_, e)| e.kind == kind).map(|(_, e)| e.value.len()).sum()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
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
