//! Per-residue embeddings: the `SEGT` binary format, TSV manifests and a
//! deterministic hash-based embedder that stands in for a protein language
//! model.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "SEGT" | u32 version = 1 | u32 L | u32 D | u16 n | n bytes UTF-8 accession | L·D f32 row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::sequence;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"SEGT";
pub const EMBEDDING_VERSION: u32 = 1;

/// An `L × D` matrix of per-residue features.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidueEmbedding {
    pub accession: String,
    length: usize,
    dim: usize,
    values: Vec<f32>,
}

impl ResidueEmbedding {
    pub fn new(accession: impl Into<String>, length: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if length == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "embedding must be at least 1x1, got {length}x{dim}"
            )));
        }
        if values.len() != length * dim {
            return Err(Error::Shape(format!(
                "embedding {length}x{dim} needs {} values, got {}",
                length * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(ResidueEmbedding {
            accession: accession.into(),
            length,
            dim,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// As a `[1, L, D]` batch of one.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.length, self.dim], self.values.clone())
            .expect("embedding dims are validated on construction")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let acc = self.accession.as_bytes();
        let acc_len =
            u16::try_from(acc.len()).map_err(|_| Error::Format(format!("accession longer than {} bytes", u16::MAX)))?;
        let as_u32 =
            |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")));
        let mut out = Vec::with_capacity(18 + acc.len() + 4 * self.values.len());
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&as_u32(self.length, "length")?.to_le_bytes());
        out.extend_from_slice(&as_u32(self.dim, "dimension")?.to_le_bytes());
        out.extend_from_slice(&acc_len.to_le_bytes());
        out.extend_from_slice(acc);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != EMBEDDING_MAGIC {
            return Err(Error::Format("bad magic, expected \"SEGT\"".into()));
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let length = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let acc_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let accession = std::str::from_utf8(r.take(acc_len)?)
            .map_err(|_| Error::Format("accession is not UTF-8".into()))?
            .to_string();
        let count = length
            .checked_mul(dim)
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let payload = r.take(count * 4)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ResidueEmbedding::new(accession, length, dim, values).map_err(|e| Error::Format(e.to_string()))
    }
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_embedding(e: &ResidueEmbedding, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, e.to_bytes()?)?;
    Ok(())
}

pub fn read_embedding(path: impl AsRef<Path>) -> Result<ResidueEmbedding> {
    ResidueEmbedding::from_bytes(&fs::read(path)?)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stand-in embedder. Entry `(i, j)` depends only on
/// `(seed, residue letter at i, i, j)` and lies in `[-1, 1)`; the top 24 hash
/// bits are used so the value is exact in `f32` on every platform.
pub fn synth_embed(accession: &str, sequence: &str, dim: usize, seed: u64) -> Result<ResidueEmbedding> {
    sequence::validate(sequence)?;
    let seeded = splitmix64(seed);
    let mut values = Vec::with_capacity(sequence.len() * dim);
    for (i, letter) in sequence.bytes().enumerate() {
        let row = splitmix64(splitmix64(seeded ^ letter as u64) ^ i as u64);
        for j in 0..dim {
            let h = splitmix64(row ^ j as u64);
            let unit = (h >> 40) as f64 / (1u64 << 23) as f64 - 1.0;
            values.push(unit as f32);
        }
    }
    ResidueEmbedding::new(accession, sequence.len(), dim, values)
}

/// Ordered `accession → file` list, stored as `accession<TAB>path` lines.
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingManifest {
    pub entries: IndexMap<String, PathBuf>,
}

impl EmbeddingManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(path)?;
        let mut entries = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || (i == 0 && line == "accession\tpath") {
                continue;
            }
            let (acc, rel) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected accession<TAB>path".into(),
            })?;
            if acc.is_empty() || rel.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty accession or path".into(),
                });
            }
            if entries.insert(acc.to_string(), base.join(rel)).is_some() {
                return Err(Error::Duplicate(acc.to_string()));
            }
        }
        Ok(EmbeddingManifest { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (acc, p) in &self.entries {
            out.push_str(acc);
            out.push('\t');
            out.push_str(&p.to_string_lossy());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn get(&self, accession: &str) -> Option<&Path> {
        self.entries.get(accession).map(PathBuf::as_path)
    }

    /// Reads the embedding for `accession`; an unlisted accession or a
    /// listed file that does not exist is `MissingInput`.
    pub fn load(&self, accession: &str) -> Result<ResidueEmbedding> {
        let path = self
            .get(accession)
            .ok_or_else(|| Error::MissingInput(accession.to_string()))?;
        read_embedding(path).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::MissingInput(format!("{accession} ({})", path.display()))
            }
            e => e,
        })
    }
}
