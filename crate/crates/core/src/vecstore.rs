//! Embedding matrices and the AMIP binary container.
//!
//! Layout of an AMIP file (all integers little-endian):
//!
//! ```text
//! "AMIP" | version u32 (=1) | rows u64 | dim u32 | dtype u8 (0 = f32) | 3 zero bytes
//! rows × dim f32, row-major
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio;
use crate::error::{Error, Result};

pub const AMIP_MAGIC: &[u8; 4] = b"AMIP";
pub const AMIP_VERSION: u32 = 1;
pub const AMIP_HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1 + 3;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StoreKind {
    Query,
    Key,
}

/// Dense row-major matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    kind: StoreKind,
}

impl EmbeddingStore {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, kind: StoreKind) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "data length {} does not match {rows}×{dim}",
                data.len()
            )));
        }
        if dim == 0 && rows > 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate {
                row: pos / dim.max(1),
                detail: "non-finite entry".into(),
            });
        }
        Ok(Self {
            rows,
            dim,
            data,
            kind,
        })
    }

    pub fn empty(dim: usize, kind: StoreKind) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
            kind,
        }
    }

    /// Builds a store from 64-bit rows, rounding to f32 storage.
    pub fn from_f64(rows: &Array2<f64>, kind: StoreKind) -> Result<Self> {
        let (n, d) = rows.dim();
        Self::new(n, d, rows.iter().map(|&v| v as f32).collect(), kind)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Widened copy used by the training and evaluation math.
    pub fn to_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.dim), |(i, j)| {
            self.data[i * self.dim + j] as f64
        })
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            data,
            kind: self.kind,
        }
    }

    pub fn with_kind(mut self, kind: StoreKind) -> Self {
        self.kind = kind;
        self
    }
}

pub fn load_store(path: impl AsRef<Path>, kind: StoreKind) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let mut r = binio::open(path)?;
    binio::expect_magic(&mut r, AMIP_MAGIC)?;
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(binio::truncated("version"))?;
    if version != AMIP_VERSION {
        return Err(Error::format("version", format!("unsupported {version}")));
    }
    let rows = r.read_u64::<LittleEndian>().map_err(binio::truncated("rows"))? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(binio::truncated("dim"))? as usize;
    let dtype = binio::read_u8(&mut r, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format("dtype", format!("expected 0 (f32), found {dtype}")));
    }
    let mut reserved = [0u8; 3];
    std::io::Read::read_exact(&mut r, &mut reserved).map_err(binio::truncated("reserved"))?;
    if reserved != [0; 3] {
        return Err(Error::format("reserved", "reserved bytes must be zero"));
    }
    let len = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::format("rows", "rows × dim overflows"))?;
    let mut data = vec![0f32; len];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(binio::truncated("payload"))?;
    binio::expect_eof(&mut r, "payload")?;
    EmbeddingStore::new(rows, dim, data, kind)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = binio::create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(AMIP_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(AMIP_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(store.rows as u64).map_err(io)?;
    w.write_u32::<LittleEndian>(store.dim as u32).map_err(io)?;
    w.write_u8(DTYPE_F32).map_err(io)?;
    w.write_all(&[0u8; 3]).map_err(io)?;
    for &v in &store.data {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    binio::finish(path, w)
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

pub fn normalize_rows(store: &EmbeddingStore) -> Result<EmbeddingStore> {
    let mut data = Vec::with_capacity(store.data.len());
    for (i, row) in store.iter_rows().enumerate() {
        let norm = row_norm(row);
        if norm == 0.0 {
            return Err(Error::Degenerate {
                row: i,
                detail: "zero row cannot be normalized".into(),
            });
        }
        data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    EmbeddingStore::new(store.rows, store.dim, data, store.kind)
}

/// Keeps the first occurrence of every bit-identical row.
pub fn dedup_rows(store: &EmbeddingStore) -> EmbeddingStore {
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(store.rows);
    let mut keep = Vec::new();
    for (i, row) in store.iter_rows().enumerate() {
        if seen.insert(row.iter().map(|v| v.to_bits()).collect()) {
            keep.push(i);
        }
    }
    store.select(&keep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub factor: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.02,
            factor: 10,
            seed: 0,
        }
    }
}

/// Expands every query row into `factor` noisy, renormalized copies.
///
/// Copies of source row `i` occupy output rows `i*factor .. (i+1)*factor`.
/// A zero noise level reproduces the input rows bit-for-bit.
pub fn augment_queries(store: &EmbeddingStore, cfg: &AugmentConfig) -> Result<EmbeddingStore> {
    if store.kind != StoreKind::Query {
        return Err(Error::invalid("augmentation applies to query stores only"));
    }
    if !(cfg.noise_std >= 0.0) || !cfg.noise_std.is_finite() {
        return Err(Error::invalid("noise_std must be finite and non-negative"));
    }
    if cfg.factor == 0 {
        return Err(Error::invalid("augmentation factor must be at least 1"));
    }
    let d = store.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(store.data.len() * cfg.factor);
    let mut buf = vec![0f64; d];
    for (i, row) in store.iter_rows().enumerate() {
        for _ in 0..cfg.factor {
            if cfg.noise_std == 0.0 {
                data.extend_from_slice(row);
                continue;
            }
            let mut attempt = 0;
            let norm = loop {
                for (b, &v) in buf.iter_mut().zip(row) {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    *b = v as f64 + cfg.noise_std * eps;
                }
                let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    break norm;
                }
                attempt += 1;
                if attempt > 1 {
                    return Err(Error::Degenerate {
                        row: i,
                        detail: "noisy copy collapsed to zero twice".into(),
                    });
                }
            };
            data.extend(buf.iter().map(|&v| (v / norm) as f32));
        }
    }
    EmbeddingStore::new(store.rows * cfg.factor, d, data, store.kind)
}

/// Random disjoint split; both halves keep the input's relative row order.
pub fn split_train_val(
    store: &EmbeddingStore,
    val_count: usize,
    seed: u64,
) -> Result<(EmbeddingStore, EmbeddingStore)> {
    if val_count >= store.rows && !(val_count == 0 && store.rows == 0) {
        return Err(Error::invalid(format!(
            "validation count {val_count} must be below row count {}",
            store.rows
        )));
    }
    let mut perm: Vec<usize> = (0..store.rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; store.rows];
    for &i in &perm[..val_count] {
        is_val[i] = true;
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..store.rows).partition(|&i| is_val[i]);
    Ok((store.select(&train), store.select(&val)))
}
