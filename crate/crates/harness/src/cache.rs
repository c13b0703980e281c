//! Content-addressed feature cache and the `DVK1` record format.
//!
//! A record is little-endian: magic `DVK1`, version `u32`, dim `u32`,
//! count `u32`, dtype `u8` (0 = f32, 1 = f64), `dim * count` values, then a
//! CRC32 of everything before it.

use std::path::{Path, PathBuf};

use dvk_core::FeatureVector;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVK1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 17;
pub const CRC_LEN: usize = 4;
/// Environment variable naming the cache root.
pub const CACHE_ENV: &str = "DVK_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Total file size of a record.
pub fn record_len(dim: usize, count: usize, dtype: Dtype) -> usize {
    HEADER_LEN + dim * count * dtype.width() + CRC_LEN
}

/// A dense `count x dim` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub dim: usize,
    pub count: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut values = Vec::new();
        let mut count = 0;
        for r in rows {
            if r.len() != dim {
                return Err(Error::Format(format!("row of length {} in a {dim}-column matrix", r.len())));
            }
            values.extend_from_slice(r);
            count += 1;
        }
        Ok(Self { dim, count, values })
    }

    pub fn from_features(features: &[FeatureVector]) -> Result<Self> {
        let dim = features.first().map_or(0, FeatureVector::dim);
        Self::from_rows(dim, features.iter().map(|f| f.values.as_slice()))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_features(&self, provenance: &str) -> Vec<FeatureVector> {
        (0..self.count).map(|i| FeatureVector::new(self.row(i).to_vec(), provenance)).collect()
    }
}

pub fn encode_record(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(record_len(m.dim, m.count, dtype));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.count as u32).to_le_bytes());
    out.push(dtype as u8);
    for &v in &m.values {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_record(bytes: &[u8]) -> Result<Matrix> {
    let bad = |m: &str| Error::Format(format!("feature record: {m}"));
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(bad("truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let body = &bytes[..bytes.len() - CRC_LEN];
    if crc32fast::hash(body) != u32_at(bytes, bytes.len() - CRC_LEN) {
        return Err(bad("checksum mismatch"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dim = u32_at(bytes, 8) as usize;
    let count = u32_at(bytes, 12) as usize;
    let dtype = Dtype::from_tag(bytes[16]).ok_or_else(|| bad("unknown dtype"))?;
    if bytes.len() != record_len(dim, count, dtype) {
        return Err(bad("length does not match header"));
    }
    let payload = &body[HEADER_LEN..];
    let values = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Matrix { dim, count, values })
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode_record(m, dtype))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_record(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// SHA-256 over length-prefixed parts, hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn new<I, P>(parts: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: AsRef<[u8]>,
    {
        let mut h = Sha256::new();
        for p in parts {
            let p = p.as_ref();
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        CacheKey(format!("{:x}", h.finalize()))
    }
}

/// Digest of raw file contents, used as the image part of cache keys.
pub fn content_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub root: PathBuf,
    pub dtype: Dtype,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            dtype: Dtype::F64,
        }
    }

    /// Cache rooted at `$DVK_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(Self::new)
    }

    pub fn path(&self, key: &CacheKey) -> PathBuf {
        self.root.join(&key.0[..2]).join(format!("{}.dvk", key.0))
    }

    pub fn store(&self, key: &CacheKey, features: &[FeatureVector]) -> Result<()> {
        write_matrix(&self.path(key), &Matrix::from_features(features)?, self.dtype)
    }

    /// `None` on a miss; unreadable or corrupt entries count as misses.
    pub fn load(&self, key: &CacheKey, provenance: &str) -> Option<Vec<FeatureVector>> {
        let path = self.path(key);
        if !path.exists() {
            return None;
        }
        match read_matrix(&path) {
            Ok(m) => Some(m.to_features(provenance)),
            Err(e) => {
                log::warn!("ignoring cache entry: {e}");
                None
            }
        }
    }
}
