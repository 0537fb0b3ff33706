//! Inverted-file index over a k-means coarse quantizer, with natural and
//! model-mapped query strategies and recall-versus-flops sweeps.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalkit::{flops_model_forward, flops_model_gradient};
use crate::nets::{predict_keys_batch, Family, Model};
use crate::oracle::{build_global_targets, top_k_among, TargetSet};
use crate::partition::{kmeans_fit, nearest_centroid, Partition, DEFAULT_MAX_ITERS};
use crate::synth::normalized;
use crate::vecstore::{EmbeddingStore, StoreKind};

/// `round(√n)`, at least 1.
pub fn default_cells(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).max(1)
}

/// Result size covering `fraction` of a database of `n` keys, at least 1.
pub fn k_for_fraction(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone)]
pub struct IvfIndex<'a> {
    coarse: Partition,
    lists: Vec<Vec<usize>>,
    keys: &'a EmbeddingStore,
}

/// k-means coarse quantizer with `cells` cells. Lists are filled by nearest
/// final centroid, so each key sits in the cell it is closest to.
pub fn build_ivf(keys: &EmbeddingStore, cells: usize, seed: u64) -> Result<IvfIndex<'_>> {
    let coarse = kmeans_fit(keys, cells, DEFAULT_MAX_ITERS, seed)?;
    let mut lists = vec![Vec::new(); cells];
    for (i, row) in keys.iter_rows().enumerate() {
        lists[nearest_centroid(row, coarse.centroids()).0].push(i);
    }
    Ok(IvfIndex { coarse, lists, keys })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfHit {
    /// `(key index, inner product)`, best first.
    pub results: Vec<(usize, f64)>,
    pub flops: u64,
}

impl<'a> IvfIndex<'a> {
    pub fn cell_count(&self) -> usize {
        self.lists.len()
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn coarse(&self) -> &Partition {
        &self.coarse
    }

    pub fn keys(&self) -> &'a EmbeddingStore {
        self.keys
    }

    /// Cells by descending centroid inner product with `q`, ties to the
    /// lower index.
    pub fn rank_cells(&self, q: &[f64]) -> Vec<usize> {
        let c = self.coarse.centroids();
        let scores: Vec<f64> = c
            .axis_iter(Axis(0))
            .map(|r| r.iter().zip(q).map(|(a, b)| a * b).sum())
            .collect();
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx
    }

    fn search_ranked(&self, q: &[f64], ranked: &[usize], n_probe: usize, k: usize) -> Result<IvfHit> {
        let probed = &ranked[..n_probe];
        let mut cand: Vec<usize> = probed.iter().flat_map(|&j| self.lists[j].iter().copied()).collect();
        let scanned = cand.len();
        cand.sort_unstable();
        let d = self.keys.dim() as u64;
        Ok(IvfHit {
            results: top_k_among(q, self.keys, cand, k)?,
            flops: 2 * d * self.cell_count() as u64 + 2 * d * scanned as u64,
        })
    }
}

/// Exact top-`k` inner products within the `n_probe` best cells.
pub fn search_ivf(index: &IvfIndex, q: &[f64], n_probe: usize, k: usize) -> Result<IvfHit> {
    Error::check_dim(index.keys.dim(), q.len())?;
    if n_probe == 0 || n_probe > index.cell_count() {
        return Err(Error::invalid(format!(
            "n_probe = {n_probe} outside 1..={}",
            index.cell_count()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    index.search_ranked(q, &index.rank_cells(q), n_probe, k)
}

#[derive(Debug, Clone, Copy)]
pub enum QueryStrategy<'a> {
    /// Search with the query itself.
    Natural,
    /// Search with the model's predicted key.
    Mapped(&'a Model),
}

impl QueryStrategy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            QueryStrategy::Natural => "natural",
            QueryStrategy::Mapped(_) => "mapped",
        }
    }

    /// Per-query cost of producing the search vector.
    pub fn extra_flops(&self) -> u64 {
        match self {
            QueryStrategy::Natural => 0,
            QueryStrategy::Mapped(m) => match m.spec.family {
                Family::KeyNet => flops_model_forward(&m.spec),
                Family::SupportNet => flops_model_gradient(&m.spec),
            },
        }
    }
}

/// Search vectors for every query row, and the per-query extra flops.
pub fn strategy_queries(strategy: &QueryStrategy, queries: &Array2<f64>) -> Result<(Array2<f64>, u64)> {
    match strategy {
        QueryStrategy::Natural => Ok((queries.clone(), 0)),
        QueryStrategy::Mapped(m) => {
            if m.spec.clusters != 1 {
                return Err(Error::invalid("mapped queries need a single-cluster model"));
            }
            let keys = predict_keys_batch(&m.spec, &m.params, queries.view())?;
            Ok((keys.index_axis_move(Axis(1), 0), strategy.extra_flops()))
        }
    }
}

pub fn strategy_query(strategy: &QueryStrategy, x: &[f64]) -> Result<(Vec<f64>, u64)> {
    let a = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let (q, f) = strategy_queries(strategy, &a)?;
    Ok((q.into_raw_vec_and_offset().0, f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub strategy: String,
    pub model_size: String,
    pub noise_std: f64,
    pub n_probe: usize,
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
    pub mean_flops: f64,
}

pub const SWEEP_HEADER: &str = "strategy,model_size,noise_std,n_probe,k,recall,mrr,mean_flops";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.strategy, p.model_size, p.noise_std, p.n_probe, p.k, p.recall, p.mrr, p.mean_flops
        );
    }
    out
}

fn sweep_at(
    index: &IvfIndex,
    strategies: &[(QueryStrategy, &str)],
    queries: &EmbeddingStore,
    targets: &TargetSet,
    n_probes: &[usize],
    k: usize,
    noise_std: f64,
) -> Result<Vec<SweepPoint>> {
    if targets.cluster_count() != 1 || targets.query_count() != queries.rows() {
        return Err(Error::invalid("sweep needs one global target per query"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to sweep"));
    }
    if let Some(&bad) = n_probes.iter().find(|&&p| p == 0 || p > index.cell_count()) {
        return Err(Error::invalid(format!("n_probe = {bad} outside 1..={}", index.cell_count())));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let global = targets.global_indices()?;
    let x = queries.to_f64();
    let mut out = Vec::new();
    for (strategy, size) in strategies {
        let (qv, extra) = strategy_queries(strategy, &x)?;
        // per query: (reciprocal rank, flops) at every n_probe
        let per_query: Vec<Vec<(f64, u64)>> = (0..qv.nrows())
            .into_par_iter()
            .map(|i| {
                let q = qv.row(i).to_vec();
                let ranked = index.rank_cells(&q);
                n_probes
                    .iter()
                    .map(|&np| {
                        let hit = index.search_ranked(&q, &ranked, np, k)?;
                        let rr = hit
                            .results
                            .iter()
                            .position(|&(j, _)| j == global[i])
                            .map_or(0.0, |r| 1.0 / (r + 1) as f64);
                        Ok((rr, hit.flops + extra))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let n = qv.nrows() as f64;
        for (pi, &np) in n_probes.iter().enumerate() {
            out.push(SweepPoint {
                strategy: strategy.name().to_string(),
                model_size: size.to_string(),
                noise_std,
                n_probe: np,
                k,
                recall: per_query.iter().filter(|q| q[pi].0 > 0.0).count() as f64 / n,
                mrr: per_query.iter().map(|q| q[pi].0).sum::<f64>() / n,
                mean_flops: per_query.iter().map(|q| q[pi].1 as f64).sum::<f64>() / n,
            });
        }
    }
    Ok(out)
}

/// Recall of the globally optimal key in the returned top-`k`, with MRR and
/// mean flops, for every strategy and `n_probe`.
pub fn nprobe_sweep(
    index: &IvfIndex,
    strategies: &[(QueryStrategy, &str)],
    queries: &EmbeddingStore,
    targets: &TargetSet,
    n_probes: &[usize],
    k: usize,
) -> Result<Vec<SweepPoint>> {
    sweep_at(index, strategies, queries, targets, n_probes, k, 0.0)
}

/// Queries plus Gaussian noise of standard deviation `std`, renormalized.
/// `std = 0` returns an exact copy.
pub fn perturb_queries(queries: &EmbeddingStore, std: f64, seed: u64) -> Result<EmbeddingStore> {
    if std == 0.0 {
        return Ok(queries.clone());
    }
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::invalid("noise standard deviation must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = queries.to_f64();
    let noise = Array2::from_shape_simple_fn(x.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
    EmbeddingStore::from_f64(&normalized(x + noise * std), StoreKind::Query)
}

/// Natural-minus-mapped difference at one `(std, n_probe)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct GapPoint {
    pub model_size: String,
    pub noise_std: f64,
    pub n_probe: usize,
    pub recall_gap: f64,
    pub mrr_gap: f64,
}

pub const GAP_HEADER: &str = "model_size,noise_std,n_probe,recall_gap,mrr_gap";

pub fn gap_csv(gaps: &[GapPoint]) -> String {
    let mut out = format!("{GAP_HEADER}\n");
    for g in gaps {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            g.model_size, g.noise_std, g.n_probe, g.recall_gap, g.mrr_gap
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodReport {
    pub points: Vec<SweepPoint>,
    pub gaps: Vec<GapPoint>,
}

/// `nprobe_sweep` on perturbed copies of `queries`, with targets recomputed
/// for each perturbed set. The noise for level `i` comes from stream `i` of
/// `seed`.
pub fn ood_sweep(
    index: &IvfIndex,
    strategies: &[(QueryStrategy, &str)],
    queries: &EmbeddingStore,
    noise_stds: &[f64],
    n_probes: &[usize],
    k: usize,
    seed: u64,
) -> Result<OodReport> {
    let mut points = Vec::new();
    let mut gaps = Vec::new();
    for (level, &std) in noise_stds.iter().enumerate() {
        let noisy = perturb_queries(queries, std, seed.wrapping_add(level as u64))?;
        let targets = build_global_targets(&noisy, index.keys)?;
        let pts = sweep_at(index, strategies, &noisy, &targets, n_probes, k, std)?;
        for m in pts.iter().filter(|p| p.strategy == "mapped") {
            if let Some(nat) = pts
                .iter()
                .find(|p| p.strategy == "natural" && p.n_probe == m.n_probe)
            {
                gaps.push(GapPoint {
                    model_size: m.model_size.clone(),
                    noise_std: std,
                    n_probe: m.n_probe,
                    recall_gap: nat.recall - m.recall,
                    mrr_gap: nat.mrr - m.mrr,
                });
            }
        }
        points.extend(pts);
    }
    Ok(OodReport { points, gaps })
}
