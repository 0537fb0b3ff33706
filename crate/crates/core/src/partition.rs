//! k-means partitioning of the key set.
//!
//! Seeding is k-means++, refinement is plain Lloyd until the assignment stops
//! changing (or `max_iters` updates). A cluster that empties out receives the
//! point currently farthest from its own centroid, so a fitted partition never
//! has an empty cluster.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::vecstore::EmbeddingStore;

pub const PARTITION_MAGIC: &[u8; 4] = b"AMPT";
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    cluster_count: usize,
    assignment: Vec<usize>,
    centroids: Array2<f64>,
    sizes: Vec<usize>,
}

impl Partition {
    /// Builds a partition from an explicit assignment; centroids are member means.
    pub fn from_assignment(
        keys: &EmbeddingStore,
        assignment: Vec<usize>,
        cluster_count: usize,
    ) -> Result<Self> {
        if assignment.len() != keys.rows() {
            return Err(Error::invalid(format!(
                "assignment has {} entries for {} keys",
                assignment.len(),
                keys.rows()
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= cluster_count) {
            return Err(Error::invalid(format!(
                "cluster id {bad} out of range for {cluster_count} clusters"
            )));
        }
        let sizes = count_sizes(&assignment, cluster_count);
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyCluster(j));
        }
        let centroids = member_means(keys, &assignment, cluster_count);
        Ok(Self {
            cluster_count,
            assignment,
            centroids,
            sizes,
        })
    }

    /// The trivial partition with every key in cluster 0.
    pub fn single(keys: &EmbeddingStore) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::EmptyCluster(0));
        }
        Self::from_assignment(keys, vec![0; keys.rows()], 1)
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_count
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> ArrayView1<'_, f64> {
        self.centroids.row(j)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Key indices per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.cluster_count];
        for (i, &a) in self.assignment.iter().enumerate() {
            m[a].push(i);
        }
        m
    }

    /// Sum of squared Euclidean distances from keys to their centroids.
    pub fn sse(&self, keys: &EmbeddingStore) -> f64 {
        sse(keys, &self.assignment, &self.centroids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binio::create(path)?;
        let io = |e| Error::io(path, e);
        std::io::Write::write_all(&mut w, PARTITION_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(self.cluster_count as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(self.assignment.len() as u64).map_err(io)?;
        for &a in &self.assignment {
            w.write_u32::<LittleEndian>(a as u32).map_err(io)?;
        }
        for &v in self.centroids.iter() {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
        binio::finish(path, w)
    }

    /// Reads a partition file; the dimension is implied by the centroid block.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = binio::open(path)?;
        binio::expect_magic(&mut r, PARTITION_MAGIC)?;
        let c = r.read_u32::<LittleEndian>().map_err(binio::truncated("c"))? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(binio::truncated("n"))? as usize;
        if c == 0 {
            return Err(Error::format("c", "cluster count must be positive"));
        }
        let mut ids = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut ids)
            .map_err(binio::truncated("assignment"))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)
            .map_err(|e| Error::format("centroids", e.to_string()))?;
        if rest.is_empty() || rest.len() % (4 * c) != 0 {
            return Err(Error::format(
                "centroids",
                format!("{} bytes is not a whole c×d f32 block", rest.len()),
            ));
        }
        let d = rest.len() / (4 * c);
        let mut cent = vec![0f32; c * d];
        (&rest[..])
            .read_f32_into::<LittleEndian>(&mut cent)
            .map_err(binio::truncated("centroids"))?;
        let assignment: Vec<usize> = ids.into_iter().map(|a| a as usize).collect();
        if let Some(&bad) = assignment.iter().find(|&&a| a >= c) {
            return Err(Error::format("assignment", format!("cluster id {bad} ≥ {c}")));
        }
        let sizes = count_sizes(&assignment, c);
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyCluster(j));
        }
        Ok(Self {
            cluster_count: c,
            assignment,
            centroids: Array2::from_shape_fn((c, d), |(i, j)| cent[i * d + j] as f64),
            sizes,
        })
    }
}

fn count_sizes(assignment: &[usize], c: usize) -> Vec<usize> {
    let mut sizes = vec![0; c];
    for &a in assignment {
        sizes[a] += 1;
    }
    sizes
}

fn member_means(keys: &EmbeddingStore, assignment: &[usize], c: usize) -> Array2<f64> {
    let d = keys.dim();
    let mut sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums.row_mut(a).iter_mut().zip(keys.row(i)) {
            *s += v as f64;
        }
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            row /= n as f64;
        }
    }
    sums
}

#[inline]
fn sq_dist(x: &[f32], c: ArrayView1<'_, f64>) -> f64 {
    x.iter()
        .zip(c.iter())
        .map(|(&a, &b)| {
            let t = a as f64 - b;
            t * t
        })
        .sum()
}

/// Nearest centroid by Euclidean distance, ties toward the lowest cluster id.
pub fn nearest_centroid(x: &[f32], centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(keys: &EmbeddingStore, centroids: &Array2<f64>) -> Vec<usize> {
    (0..keys.rows())
        .into_par_iter()
        .map(|i| nearest_centroid(keys.row(i), centroids).0)
        .collect()
}

fn sse(keys: &EmbeddingStore, assignment: &[usize], centroids: &Array2<f64>) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(keys.row(i), centroids.row(a)))
        .sum()
}

fn kmeans_pp(keys: &EmbeddingStore, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = keys.rows();
    let d = keys.dim();
    let mut chosen = Vec::with_capacity(c);
    chosen.push(rng.random_range(0..n));
    let as_centroid = |i: usize| -> Array2<f64> {
        Array2::from_shape_fn((1, d), |(_, j)| keys.row(i)[j] as f64)
    };
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(keys.row(i), as_centroid(chosen[0]).row(0)))
        .collect();
    while chosen.len() < c {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point duplicates a chosen one
            (0..n).find(|i| !chosen.contains(i)).expect("c ≤ n")
        };
        chosen.push(next);
        let cen = as_centroid(next);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(keys.row(i), cen.row(0)));
        }
    }
    Array2::from_shape_fn((c, d), |(j, k)| keys.row(chosen[j])[k] as f64)
}

/// Moves the worst-fit point of a multi-member cluster into each empty cluster.
fn repair_empty(
    keys: &EmbeddingStore,
    assignment: &mut [usize],
    centroids: &Array2<f64>,
    c: usize,
) {
    let mut sizes = count_sizes(assignment, c);
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let mut worst: Option<(usize, f64)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(keys.row(i), centroids.row(a));
            if worst.is_none_or(|(_, wd)| d > wd) {
                worst = Some((i, d));
            }
        }
        let (i, _) = worst.expect("c ≤ n guarantees a donor cluster");
        sizes[assignment[i]] -= 1;
        assignment[i] = empty;
        sizes[empty] += 1;
    }
}

/// k-means fit that also returns the SSE after every centroid update.
pub fn kmeans_fit_traced(
    keys: &EmbeddingStore,
    c: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Partition, Vec<f64>)> {
    if c == 0 {
        return Err(Error::invalid("cluster count must be positive"));
    }
    if c > keys.rows() {
        return Err(Error::invalid(format!(
            "cannot form {c} clusters from {} keys",
            keys.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(keys, c, &mut rng);
    let mut assignment = assign_all(keys, &centroids);
    let mut trace = Vec::new();
    let mut iter = 0;
    loop {
        repair_empty(keys, &mut assignment, &centroids, c);
        centroids = member_means(keys, &assignment, c);
        trace.push(sse(keys, &assignment, &centroids));
        iter += 1;
        if iter >= max_iters {
            break;
        }
        let next = assign_all(keys, &centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let sizes = count_sizes(&assignment, c);
    Ok((
        Partition {
            cluster_count: c,
            assignment,
            centroids,
            sizes,
        },
        trace,
    ))
}

pub fn kmeans_fit(keys: &EmbeddingStore, c: usize, max_iters: usize, seed: u64) -> Result<Partition> {
    kmeans_fit_traced(keys, c, max_iters, seed).map(|(p, _)| p)
}

/// Coefficient of variation of the cluster sizes; 0 is perfectly even.
pub fn balance_score(p: &Partition) -> f64 {
    let n = p.sizes.len() as f64;
    let mean = p.sizes.iter().sum::<usize>() as f64 / n;
    let var = p
        .sizes
        .iter()
        .map(|&s| (s as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt() / mean
}

/// Seed used by restart `r`; restart 0 reuses `seed` itself.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs `restarts` independent fits and keeps the most evenly sized one.
pub fn select_balanced(
    keys: &EmbeddingStore,
    c: usize,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Partition> {
    select_balanced_scored(keys, c, restarts, max_iters, seed).map(|(p, _)| p)
}

/// As [`select_balanced`], also returning every restart's balance score.
pub fn select_balanced_scored(
    keys: &EmbeddingStore,
    c: usize,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Partition, Vec<f64>)> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut best: Option<(Partition, f64)> = None;
    let mut scores = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let p = kmeans_fit(keys, c, max_iters, restart_seed(seed, r))?;
        let s = balance_score(&p);
        scores.push(s);
        if best.as_ref().is_none_or(|(_, bs)| s < *bs) {
            best = Some((p, s));
        }
    }
    Ok((best.expect("restarts ≥ 1").0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecstore::StoreKind;

    fn store(rows: usize, dim: usize, data: Vec<f32>) -> EmbeddingStore {
        EmbeddingStore::new(rows, dim, data, StoreKind::Key).unwrap()
    }

    fn with_sizes(sizes: &[usize]) -> Partition {
        let n: usize = sizes.iter().sum();
        let mut assignment = Vec::new();
        for (j, &s) in sizes.iter().enumerate() {
            assignment.extend(std::iter::repeat_n(j, s));
        }
        let keys = store(n, 1, (0..n).map(|i| i as f32).collect());
        Partition::from_assignment(&keys, assignment, sizes.len()).unwrap()
    }

    #[test]
    fn long_rectangle_splits_on_short_edges() {
        let keys = store(4, 2, vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0]);
        for seed in 0..8 {
            let p = kmeans_fit(&keys, 2, 100, seed).unwrap();
            let a = p.assignment();
            assert_eq!(a[0], a[1]);
            assert_eq!(a[2], a[3]);
            assert_ne!(a[0], a[2]);
            let left = p.centroid(a[0]);
            assert_eq!(left.to_vec(), vec![0.0, 0.5]);
            assert_eq!(p.centroid(a[2]).to_vec(), vec![10.0, 0.5]);
        }
    }

    #[test]
    fn c_equals_rows_gives_singletons() {
        let keys = store(5, 2, (0..10).map(|v| (v * v) as f32).collect());
        let p = kmeans_fit(&keys, 5, 100, 3).unwrap();
        assert!(p.sizes().iter().all(|&s| s == 1));
        for i in 0..5 {
            let c = p.centroid(p.assignment()[i]);
            assert_eq!(c.to_vec(), keys.row_f64(i));
        }
    }

    #[test]
    fn bad_cluster_counts() {
        let keys = store(2, 1, vec![0.0, 1.0]);
        assert!(kmeans_fit(&keys, 0, 10, 0).is_err());
        assert!(kmeans_fit(&keys, 3, 10, 0).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let keys = store(4, 1, vec![1.0, 1.0, 1.0, 5.0]);
        let p = kmeans_fit(&keys, 3, 100, 0).unwrap();
        assert!(p.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn balance_examples() {
        assert_eq!(balance_score(&with_sizes(&[5, 5])), 0.0);
        assert!((balance_score(&with_sizes(&[2, 6])) - 0.5).abs() < 1e-15);
        // sizes 1,1,1,9: mean 3, population variance (4+4+4+36)/4 = 12
        let direct = 12f64.sqrt() / 3.0;
        assert!((balance_score(&with_sizes(&[1, 1, 1, 9])) - direct).abs() < 1e-15);
    }

    #[test]
    fn single_restart_equals_plain_fit() {
        let keys = store(6, 1, vec![0.0, 0.1, 0.2, 5.0, 5.1, 9.0]);
        let a = select_balanced(&keys, 2, 1, 100, 11).unwrap();
        let b = kmeans_fit(&keys, 2, 100, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ampt");
        let keys = store(4, 2, vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0]);
        let p = kmeans_fit(&keys, 2, 100, 0).unwrap();
        p.save(&path).unwrap();
        let back = Partition::load(&path).unwrap();
        assert_eq!(back.assignment(), p.assignment());
        assert_eq!(back.sizes(), p.sizes());
        assert_eq!(back.centroids(), p.centroids());
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 4 + 4 + 8 + 4 * 4 + 2 * 2 * 4);
    }
}
