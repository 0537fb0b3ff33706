//! Exact maximum inner product search.
//!
//! Everything here is brute force over f32 keys with f64 accumulation. Ties
//! are broken toward the lowest global key index, so results are independent
//! of evaluation order and of how many threads computed them.

use std::cmp::Ordering;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::vecstore::EmbeddingStore;

pub const TARGETS_MAGIC: &[u8; 4] = b"AMTG";
pub const TARGETS_VERSION: u32 = 1;

#[inline]
pub fn dot(x: &[f64], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(a, &b)| a * b as f64).sum()
}

/// `true` when `(value, index)` ranks ahead of `(best_value, best_index)`.
#[inline]
fn beats(value: f64, index: usize, best_value: f64, best_index: usize) -> bool {
    value > best_value || (value == best_value && index < best_index)
}

/// Support value `max ⟨x, y⟩` and the index attaining it, optionally
/// restricted to `members`.
pub fn support_and_argmax(
    query: &[f64],
    keys: &EmbeddingStore,
    members: Option<&[usize]>,
) -> Result<(f64, usize)> {
    Error::check_dim(keys.dim(), query.len())?;
    let mut best: Option<(f64, usize)> = None;
    let mut visit = |i: usize| {
        let v = dot(query, keys.row(i));
        match best {
            Some((bv, bi)) if !beats(v, i, bv, bi) => {}
            _ => best = Some((v, i)),
        }
    };
    match members {
        Some(m) => m.iter().for_each(|&i| visit(i)),
        None => (0..keys.rows()).for_each(&mut visit),
    }
    best.ok_or_else(|| Error::invalid("argmax over an empty key set"))
}

fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` largest inner products, descending, ties by lowest index.
pub fn top_k(query: &[f64], keys: &EmbeddingStore, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > keys.rows() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={}",
            keys.rows()
        )));
    }
    top_k_among(query, keys, (0..keys.rows()).collect(), k)
}

/// Top-k restricted to `candidates`; returns fewer than `k` entries when the
/// candidate list is shorter.
pub(crate) fn top_k_among(
    query: &[f64],
    keys: &EmbeddingStore,
    candidates: Vec<usize>,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    Error::check_dim(keys.dim(), query.len())?;
    let mut scored: Vec<(usize, f64)> = candidates
        .into_iter()
        .map(|i| (i, dot(query, keys.row(i))))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored)
}

/// `2·n_keys·d`: one multiply-add counts as two flops.
pub fn flops_exact_search(n_keys: usize, d: usize) -> u64 {
    2 * n_keys as u64 * d as u64
}

/// Per-query, per-cluster optimal keys and support values.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    query_count: usize,
    cluster_count: usize,
    key_index: Vec<usize>,
    support_value: Vec<f64>,
}

impl TargetSet {
    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_count
    }

    pub fn key_index(&self, query: usize, cluster: usize) -> usize {
        self.key_index[query * self.cluster_count + cluster]
    }

    pub fn support_value(&self, query: usize, cluster: usize) -> f64 {
        self.support_value[query * self.cluster_count + cluster]
    }

    /// Row of `c` key indices for one query.
    pub fn key_indices(&self, query: usize) -> &[usize] {
        &self.key_index[query * self.cluster_count..(query + 1) * self.cluster_count]
    }

    pub fn support_values(&self, query: usize) -> &[f64] {
        &self.support_value[query * self.cluster_count..(query + 1) * self.cluster_count]
    }

    /// Single-cluster targets: index of the global optimum for every query.
    pub fn global_indices(&self) -> Result<Vec<usize>> {
        if self.cluster_count != 1 {
            return Err(Error::invalid("global indices need a single-cluster target set"));
        }
        Ok(self.key_index.clone())
    }

    /// Targets for a subset of queries, in the given order.
    pub fn select(&self, queries: &[usize]) -> TargetSet {
        let c = self.cluster_count;
        let mut key_index = Vec::with_capacity(queries.len() * c);
        let mut support_value = Vec::with_capacity(queries.len() * c);
        for &q in queries {
            key_index.extend_from_slice(self.key_indices(q));
            support_value.extend_from_slice(self.support_values(q));
        }
        TargetSet {
            query_count: queries.len(),
            cluster_count: c,
            key_index,
            support_value,
        }
    }

    fn from_indices(
        queries: &EmbeddingStore,
        keys: &EmbeddingStore,
        cluster_count: usize,
        key_index: Vec<usize>,
    ) -> Result<Self> {
        Error::check_dim(keys.dim(), queries.dim())?;
        if key_index.len() != queries.rows() * cluster_count {
            return Err(Error::format(
                "key_index",
                format!(
                    "expected {} entries, found {}",
                    queries.rows() * cluster_count,
                    key_index.len()
                ),
            ));
        }
        if let Some(&bad) = key_index.iter().find(|&&k| k >= keys.rows()) {
            return Err(Error::format(
                "key_index",
                format!("index {bad} out of range for {} keys", keys.rows()),
            ));
        }
        let support_value = key_index
            .iter()
            .enumerate()
            .map(|(e, &k)| dot(&queries.row_f64(e / cluster_count), keys.row(k)))
            .collect();
        Ok(TargetSet {
            query_count: queries.rows(),
            cluster_count,
            key_index,
            support_value,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binio::create(path)?;
        let io = |e| Error::io(path, e);
        std::io::Write::write_all(&mut w, TARGETS_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(TARGETS_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(self.query_count as u64).map_err(io)?;
        w.write_u32::<LittleEndian>(self.cluster_count as u32).map_err(io)?;
        for &k in &self.key_index {
            w.write_u64::<LittleEndian>(k as u64).map_err(io)?;
        }
        binio::finish(path, w)
    }

    /// Reads key indices and recomputes support values from the stores.
    pub fn load(
        path: impl AsRef<Path>,
        queries: &EmbeddingStore,
        keys: &EmbeddingStore,
    ) -> Result<Self> {
        let path = path.as_ref();
        let mut r = binio::open(path)?;
        binio::expect_magic(&mut r, TARGETS_MAGIC)?;
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(binio::truncated("version"))?;
        if version != TARGETS_VERSION {
            return Err(Error::format("version", format!("unsupported {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(binio::truncated("N"))? as usize;
        let c = r.read_u32::<LittleEndian>().map_err(binio::truncated("c"))? as usize;
        if n != queries.rows() {
            return Err(Error::format(
                "N",
                format!("file has {n} queries, store has {}", queries.rows()),
            ));
        }
        if c == 0 {
            return Err(Error::format("c", "cluster count must be positive"));
        }
        let mut raw = vec![0u64; n * c];
        r.read_u64_into::<LittleEndian>(&mut raw)
            .map_err(binio::truncated("key_index"))?;
        binio::expect_eof(&mut r, "key_index")?;
        Self::from_indices(queries, keys, c, raw.into_iter().map(|k| k as usize).collect())
    }
}

/// Within-cluster argmax for every (query, cluster) pair.
pub fn build_targets(
    queries: &EmbeddingStore,
    keys: &EmbeddingStore,
    partition: &Partition,
) -> Result<TargetSet> {
    Error::check_dim(keys.dim(), queries.dim())?;
    if partition.assignment().len() != keys.rows() {
        return Err(Error::invalid(format!(
            "partition covers {} keys, store has {}",
            partition.assignment().len(),
            keys.rows()
        )));
    }
    let c = partition.cluster_count();
    let members = partition.members();
    if let Some(j) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCluster(j));
    }
    let per_query: Vec<Vec<(f64, usize)>> = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let x = queries.row_f64(i);
            members
                .iter()
                .map(|m| support_and_argmax(&x, keys, Some(m)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut key_index = Vec::with_capacity(queries.rows() * c);
    let mut support_value = Vec::with_capacity(queries.rows() * c);
    for row in per_query {
        for (v, k) in row {
            key_index.push(k);
            support_value.push(v);
        }
    }
    Ok(TargetSet {
        query_count: queries.rows(),
        cluster_count: c,
        key_index,
        support_value,
    })
}

/// Targets against the whole key set (a single cluster).
pub fn build_global_targets(queries: &EmbeddingStore, keys: &EmbeddingStore) -> Result<TargetSet> {
    build_targets(queries, keys, &Partition::single(keys)?)
}
