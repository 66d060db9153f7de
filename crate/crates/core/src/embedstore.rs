//! EMB1 embedding files and the in-memory [`EmbeddingSet`].
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `EMB1`                  |
//! | 4..8   | version `u32` (= 1)           |
//! | 8..12  | dim `u32`                     |
//! | 12..20 | count `u64`                   |
//! | 20..24 | flags `u32` (bit 0: labels)   |
//! | 24..   | `count * dim` `f32`, row-major |
//! | ..     | `count` `u32` labels if flagged |
//!
//! Per-row metadata lives in an optional `<path>.meta.jsonl` sidecar.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const FLAG_LABELS: u32 = 1;

/// One record of the metadata sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RowMeta {
    pub row: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl RowMeta {
    pub fn with_text(row: u64, text: impl Into<String>) -> Self {
        RowMeta { row, text: Some(text.into()), ..Default::default() }
    }
}

/// Ordered, unique class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Label(format!("need at least 2 classes, got {}", names.len())));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Label(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Label(format!("duplicate class name '{n}'")));
            }
        }
        Ok(LabelSpace { names })
    }

    /// `class_0`, `class_1`, ...
    pub fn numbered(c: usize) -> Result<Self> {
        Self::new((0..c).map(|i| format!("class_{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, c: usize) -> &str {
        &self.names[c]
    }
}

/// A dense `count x dim` matrix of finite `f32` embeddings with optional
/// labels and per-row metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<u32>>,
    meta: Option<Vec<RowMeta>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("dim must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "payload of {} floats is not a multiple of dim {dim}",
                data.len()
            )));
        }
        check_finite(&data, dim)?;
        Ok(EmbeddingSet { dim, data, labels: None, meta: None })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.count() {
            return Err(Error::Label(format!(
                "{} labels for {} rows",
                labels.len(),
                self.count()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_meta(mut self, meta: Vec<RowMeta>) -> Result<Self> {
        check_meta(&meta, self.count())?;
        self.meta = Some(meta);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Labels, or a [`Error::Label`] if the set is unlabeled.
    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels().ok_or_else(|| Error::Label("set carries no labels".into()))
    }

    pub fn meta(&self) -> Option<&[RowMeta]> {
        self.meta.as_deref()
    }

    pub fn text(&self, i: usize) -> Option<&str> {
        self.meta.as_ref().and_then(|m| m[i].text.as_deref())
    }

    /// Checks every label is below `space.len()`.
    pub fn check_labels(&self, space: &LabelSpace) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= space.len()) {
                return Err(Error::Label(format!(
                    "row {row} has label {l}, label space has {} classes",
                    space.len()
                )));
            }
        }
        Ok(())
    }

    /// Rows at `indices`, in the given order. Metadata is re-keyed to the
    /// new row positions.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        let meta = self.meta.as_ref().map(|m| {
            indices
                .iter()
                .enumerate()
                .map(|(new, &i)| RowMeta { row: new as u64, ..m[i].clone() })
                .collect()
        });
        EmbeddingSet { dim: self.dim, data, labels, meta }
    }

    /// Same shape and metadata, new payload. Used by transforms that only
    /// touch the numbers.
    pub(crate) fn replace_data(&self, data: Vec<f32>) -> Result<EmbeddingSet> {
        debug_assert_eq!(data.len(), self.data.len());
        check_finite(&data, self.dim)?;
        Ok(EmbeddingSet { dim: self.dim, data, labels: self.labels.clone(), meta: self.meta.clone() })
    }

    /// Row-wise concatenation. Labels and metadata survive only if every part
    /// carries them.
    pub fn concat(parts: &[&EmbeddingSet]) -> Result<EmbeddingSet> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let dim = first.dim;
        let mut data = Vec::new();
        let mut labels = parts.iter().all(|p| p.labels.is_some()).then(Vec::new);
        let mut meta = parts.iter().all(|p| p.meta.is_some()).then(Vec::new);
        for p in parts {
            if p.dim != dim {
                return Err(Error::Shape(format!("cannot concatenate dim {} with dim {dim}", p.dim)));
            }
            let offset = data.len() / dim;
            data.extend_from_slice(&p.data);
            if let (Some(out), Some(l)) = (labels.as_mut(), p.labels.as_ref()) {
                out.extend_from_slice(l);
            }
            if let (Some(out), Some(m)) = (meta.as_mut(), p.meta.as_ref()) {
                out.extend(m.iter().map(|r| RowMeta { row: r.row + offset as u64, ..r.clone() }));
            }
        }
        Ok(EmbeddingSet { dim, data, labels, meta })
    }
}

fn check_finite(data: &[f32], dim: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(Error::NonFinite { row: p / dim, col: p % dim }),
        None => Ok(()),
    }
}

fn check_meta(meta: &[RowMeta], count: usize) -> Result<()> {
    if meta.len() != count {
        return Err(Error::Meta(format!("{} metadata records for {count} rows", meta.len())));
    }
    if let Some((i, m)) = meta.iter().enumerate().find(|(i, m)| m.row != *i as u64) {
        return Err(Error::Meta(format!("record {i} is keyed to row {}", m.row)));
    }
    Ok(())
}

/// Sidecar path: `<path>.meta.jsonl`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

/// Encodes the binary part of an EMB1 file.
pub fn encode(set: &EmbeddingSet) -> Vec<u8> {
    let count = set.count();
    let mut out = Vec::with_capacity(HEADER_LEN + set.data.len() * 4 + count * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    let flags = if set.labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &set.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

/// Decodes the binary part of an EMB1 file (no sidecar).
pub fn decode(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the 24-byte header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = u32_at(8) as usize;
    if dim == 0 {
        return Err(Error::Format("dim is zero".into()));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let flags = u32_at(20);
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let has_labels = flags & FLAG_LABELS != 0;

    let per_row = dim as u128 * 4 + if has_labels { 4 } else { 0 };
    let expected = HEADER_LEN as u128 + count as u128 * per_row;
    let actual = bytes.len() as u128;
    if expected > actual {
        return Err(Error::Truncated {
            expected: u64::try_from(expected).unwrap_or(u64::MAX),
            actual: actual as u64,
        });
    }
    if expected < actual {
        return Err(Error::Format(format!("{} trailing bytes after payload", actual - expected)));
    }
    let count = count as usize;
    let payload_end = HEADER_LEN + count * dim * 4;
    let data: Vec<f32> = bytes[HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_finite(&data, dim)?;
    let labels = has_labels.then(|| {
        bytes[payload_end..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    Ok(EmbeddingSet { dim, data, labels, meta: None })
}

/// Loads an EMB1 file and, if present, its metadata sidecar.
pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut set = decode(&bytes)?;
    let mp = meta_path(path);
    if mp.exists() {
        let f = fs::File::open(&mp).map_err(|e| Error::io(&mp, e))?;
        let mut meta = Vec::with_capacity(set.count());
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&mp, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RowMeta = serde_json::from_str(&line)
                .map_err(|e| Error::Meta(format!("{}:{}: {e}", mp.display(), i + 1)))?;
            meta.push(rec);
        }
        check_meta(&meta, set.count())?;
        set.meta = Some(meta);
    }
    Ok(set)
}

/// Writes an EMB1 file, plus the sidecar when the set has metadata. A stale
/// sidecar from an earlier write is removed.
pub fn save(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(set)).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    match &set.meta {
        Some(meta) => {
            let f = fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?;
            let mut w = BufWriter::new(f);
            for rec in meta {
                serde_json::to_writer(&mut w, rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&mp, e))?;
            }
            w.flush().map_err(|e| Error::io(&mp, e))?;
        }
        None => {
            if mp.exists() {
                fs::remove_file(&mp).map_err(|e| Error::io(&mp, e))?;
            }
        }
    }
    Ok(())
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(set.data.len());
    for (i, row) in set.rows().enumerate() {
        let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateRow { row: i });
        }
        data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    set.replace_data(data)
}
