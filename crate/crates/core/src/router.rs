//! Two-stage clustered search: score the clusters, then search the best
//! `k` of them exhaustively.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalkit::{flops_model_forward, CostCurve};
use crate::nets::{score_batch, Family, Model};
use crate::oracle::{support_and_argmax, TargetSet};
use crate::partition::Partition;
use crate::vecstore::EmbeddingStore;

#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    /// Per-cluster support estimates from a trained model.
    Learned(&'a Model),
    /// Inner product with each cluster centroid.
    Centroid(&'a Partition),
}

impl Scorer<'_> {
    pub fn cluster_count(&self) -> usize {
        match self {
            Scorer::Learned(m) => m.spec.clusters,
            Scorer::Centroid(p) => p.cluster_count(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Scorer::Learned(m) => m.spec.input_dim,
            Scorer::Centroid(p) => p.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Learned(m) => m.spec.family.name(),
            Scorer::Centroid(_) => "centroid",
        }
    }

    /// Per-query cost of producing the `c` scores. A KeyNet pays its forward
    /// pass plus one `d`-dimensional dot product per cluster.
    pub fn flops(&self) -> u64 {
        match self {
            Scorer::Learned(m) => {
                let fwd = flops_model_forward(&m.spec);
                match m.spec.family {
                    Family::SupportNet => fwd,
                    Family::KeyNet => fwd + 2 * (m.spec.clusters * m.spec.input_dim) as u64,
                }
            }
            Scorer::Centroid(p) => 2 * (p.dim() * p.cluster_count()) as u64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoutePlan<'a> {
    pub scorer: Scorer<'a>,
    pub k_clusters: usize,
}

impl RoutePlan<'_> {
    pub fn validate(&self) -> Result<()> {
        let c = self.scorer.cluster_count();
        if self.k_clusters == 0 || self.k_clusters > c {
            return Err(Error::invalid(format!("k_clusters = {} outside 1..={c}", self.k_clusters)));
        }
        Ok(())
    }
}

/// Cluster scores for every row of `x`: `B×c`, higher is better.
pub fn score_clusters_batch(scorer: &Scorer, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Error::check_dim(scorer.dim(), x.ncols())?;
    match scorer {
        Scorer::Learned(m) => score_batch(&m.spec, &m.params, x),
        Scorer::Centroid(p) => Ok(x.dot(&p.centroids().t())),
    }
}

pub fn score_clusters(scorer: &Scorer, x: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(score_clusters_batch(scorer, view)?.into_raw_vec_and_offset().0)
}

/// Indices of the `k` highest scores, best first, ties to the lower index.
pub fn top_clusters(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn search_flops(d: usize, members: &[Vec<usize>], chosen: &[usize]) -> u64 {
    chosen.iter().map(|&j| 2 * (d * members[j].len()) as u64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutedHit {
    pub index: usize,
    pub value: f64,
    pub flops: u64,
}

/// Exact argmax over the union of the selected clusters.
pub fn routed_search(
    plan: &RoutePlan,
    x: &[f64],
    keys: &EmbeddingStore,
    partition: &Partition,
) -> Result<RoutedHit> {
    plan.validate()?;
    check_partition(plan, keys, partition)?;
    let scores = score_clusters(&plan.scorer, x)?;
    let chosen = top_clusters(&scores, plan.k_clusters);
    let members = partition.members();
    let mut union: Vec<usize> = chosen.iter().flat_map(|&j| members[j].iter().copied()).collect();
    union.sort_unstable();
    let (value, index) = support_and_argmax(x, keys, Some(&union))?;
    Ok(RoutedHit {
        index,
        value,
        flops: plan.scorer.flops() + search_flops(keys.dim(), &members, &chosen),
    })
}

fn check_partition(plan: &RoutePlan, keys: &EmbeddingStore, partition: &Partition) -> Result<()> {
    if partition.cluster_count() != plan.scorer.cluster_count() {
        return Err(Error::invalid(format!(
            "scorer covers {} clusters, partition has {}",
            plan.scorer.cluster_count(),
            partition.cluster_count()
        )));
    }
    if partition.assignment().len() != keys.rows() {
        return Err(Error::invalid("partition does not cover the key store"));
    }
    Ok(())
}

/// Fraction of queries whose globally optimal key lies in a selected
/// cluster, and the mean per-query flops.
pub fn routing_accuracy(
    plan: &RoutePlan,
    queries: &EmbeddingStore,
    targets: &TargetSet,
    partition: &Partition,
) -> Result<(f64, f64)> {
    let curve = accuracy_by_k(&plan.scorer, queries, targets, partition, plan.k_clusters)?;
    Ok(curve[plan.k_clusters - 1])
}

/// `(accuracy, mean flops)` for `k = 1..=k_max`, scoring each query once.
fn accuracy_by_k(
    scorer: &Scorer,
    queries: &EmbeddingStore,
    targets: &TargetSet,
    partition: &Partition,
    k_max: usize,
) -> Result<Vec<(f64, f64)>> {
    RoutePlan {
        scorer: *scorer,
        k_clusters: k_max,
    }
    .validate()?;
    if partition.cluster_count() != scorer.cluster_count() {
        return Err(Error::invalid("scorer and partition disagree on cluster count"));
    }
    if targets.cluster_count() != 1 || targets.query_count() != queries.rows() {
        return Err(Error::invalid("routing needs one global target per query"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to route"));
    }
    let global = targets.global_indices()?;
    let assignment = partition.assignment();
    if global.iter().any(|&t| t >= assignment.len()) {
        return Err(Error::invalid("target key outside the partition"));
    }
    let scores = score_clusters_batch(scorer, queries.to_f64().view())?;
    let members = partition.members();
    let d = partition.dim();
    let per_query: Vec<(Vec<bool>, Vec<u64>)> = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let order = top_clusters(scores.row(i).as_slice().expect("standard layout"), k_max);
            let home = assignment[global[i]];
            let mut hit = Vec::with_capacity(k_max);
            let mut flops = Vec::with_capacity(k_max);
            let mut found = false;
            let mut spent = scorer.flops();
            for &j in &order {
                found |= j == home;
                spent += 2 * (d * members[j].len()) as u64;
                hit.push(found);
                flops.push(spent);
            }
            (hit, flops)
        })
        .collect();
    let n = queries.rows() as f64;
    Ok((0..k_max)
        .map(|k| {
            let acc = per_query.iter().filter(|q| q.0[k]).count() as f64 / n;
            let fl = per_query.iter().map(|q| q.1[k] as f64).sum::<f64>() / n;
            (acc, fl)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteRow {
    pub scorer: String,
    pub model_size: String,
    pub k_clusters: usize,
    pub flops: f64,
    pub routing_accuracy: f64,
}

pub const CURVE_HEADER: &str = "scorer,model_size,k_clusters,flops,routing_accuracy";

/// One row per `(scorer, k)` for `k = 1..=k_max`. Each scorer comes with
/// a size label (empty for the centroid baseline).
pub fn routing_curve(
    scorers: &[(Scorer, &str)],
    queries: &EmbeddingStore,
    targets: &TargetSet,
    partition: &Partition,
    k_max: usize,
) -> Result<Vec<RouteRow>> {
    let mut rows = Vec::new();
    for (scorer, size) in scorers {
        for (k, (acc, fl)) in accuracy_by_k(scorer, queries, targets, partition, k_max)?
            .into_iter()
            .enumerate()
        {
            rows.push(RouteRow {
                scorer: scorer.name().to_string(),
                model_size: size.to_string(),
                k_clusters: k + 1,
                flops: fl,
                routing_accuracy: acc,
            });
        }
    }
    Ok(rows)
}

pub fn curve_csv(rows: &[RouteRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.scorer, r.model_size, r.k_clusters, r.flops, r.routing_accuracy
        );
    }
    out
}

/// Rows of one scorer as a cost curve labelled by `k`.
pub fn to_cost_curve<'r>(rows: impl IntoIterator<Item = &'r RouteRow>) -> CostCurve {
    let mut c = CostCurve::default();
    for r in rows {
        c.push(r.flops, r.routing_accuracy, format!("k={}", r.k_clusters));
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{build_global_targets, dot};
    use crate::partition::kmeans_fit;
    use crate::synth::{mixture, MixtureConfig};

    fn data() -> (EmbeddingStore, EmbeddingStore, Partition) {
        let m = mixture(&MixtureConfig {
            keys: 300,
            train_queries: 0,
            val_queries: 60,
            dim: 8,
            components: 4,
            ..Default::default()
        })
        .unwrap();
        let p = kmeans_fit(&m.keys, 4, 50, 1).unwrap();
        (m.keys, m.val, p)
    }

    #[test]
    fn top_clusters_break_ties_low() {
        assert_eq!(top_clusters(&[1.0, 3.0, 3.0, 0.0], 3), vec![1, 2, 0]);
    }

    #[test]
    fn all_clusters_equals_global_search() {
        let (keys, q, p) = data();
        let plan = RoutePlan {
            scorer: Scorer::Centroid(&p),
            k_clusters: 4,
        };
        for i in 0..q.rows() {
            let x = q.row_f64(i);
            let hit = routed_search(&plan, &x, &keys, &p).unwrap();
            let (v, idx) = support_and_argmax(&x, &keys, None).unwrap();
            assert_eq!((hit.index, hit.value), (idx, v));
            assert_eq!(hit.flops, 2 * 8 * 4 + 2 * 8 * 300);
        }
        let t = build_global_targets(&q, &keys).unwrap();
        let (acc, _) = routing_accuracy(&plan, &q, &t, &p).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn routed_result_is_subset_argmax() {
        let (keys, q, p) = data();
        let plan = RoutePlan {
            scorer: Scorer::Centroid(&p),
            k_clusters: 2,
        };
        let members = p.members();
        for i in 0..q.rows() {
            let x = q.row_f64(i);
            let scores = score_clusters(&plan.scorer, &x).unwrap();
            let chosen = top_clusters(&scores, 2);
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for &j in &chosen {
                for &k in &members[j] {
                    let v = dot(&x, keys.row(k));
                    if v > best.0 || (v == best.0 && k < best.1) {
                        best = (v, k);
                    }
                }
            }
            let hit = routed_search(&plan, &x, &keys, &p).unwrap();
            assert_eq!((hit.value, hit.index), best);
        }
    }

    #[test]
    fn accuracy_monotone_in_k_and_curve_rows() {
        let (keys, q, p) = data();
        let t = build_global_targets(&q, &keys).unwrap();
        let rows = routing_curve(&[(Scorer::Centroid(&p), "")], &q, &t, &p, 4).unwrap();
        assert_eq!(rows.len(), 4);
        for w in rows.windows(2) {
            assert!(w[1].routing_accuracy >= w[0].routing_accuracy);
            assert!(w[1].flops > w[0].flops);
        }
        assert_eq!(rows[3].routing_accuracy, 1.0);
        let csv = curve_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with(CURVE_HEADER));
    }

    #[test]
    fn centroid_self_similarity() {
        let (_, _, p) = data();
        // unit-normalized centroid as query
        for j in 0..4 {
            let c = p.centroid(j).to_vec();
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: Vec<f64> = c.iter().map(|v| v / n).collect();
            let s = score_clusters(&Scorer::Centroid(&p), &u).unwrap();
            assert_eq!(top_clusters(&s, 1), vec![j]);
        }
    }

    #[test]
    fn bad_plans_are_rejected() {
        let (keys, q, p) = data();
        let plan = RoutePlan {
            scorer: Scorer::Centroid(&p),
            k_clusters: 5,
        };
        assert!(routed_search(&plan, &q.row_f64(0), &keys, &p).is_err());
    }
}
