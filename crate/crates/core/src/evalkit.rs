//! Retrieval metrics and the flop accounting shared by the benchmarks.

use std::collections::BTreeMap;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nets::{predict_keys_batch, Model, NetSpec};
use crate::oracle::TargetSet;
use crate::partition::Partition;
use crate::vecstore::EmbeddingStore;

/// Floor applied to both squared distances inside the transport-error log.
pub const RTE_FLOOR: f64 = 1e-12;

/// Cutoffs reported in [`MetricReport`].
pub const REPORT_KS: [usize; 4] = [1, 5, 10, 100];

/// Mean log ratio plus the number of rows whose baseline distance hit the
/// floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportError {
    pub e_rel: f64,
    pub flagged: usize,
}

impl TransportError {
    pub fn rte(&self) -> f64 {
        self.e_rel.exp()
    }
}

fn sq_dist(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_ratio(pred: &[f64], query: &[f64], target: &[f64]) -> (f64, bool) {
    let num = sq_dist(pred.iter().copied(), target.iter().copied());
    let den = sq_dist(query.iter().copied(), target.iter().copied());
    (num.max(RTE_FLOOR).ln() - den.max(RTE_FLOOR).ln(), den < RTE_FLOOR)
}

/// `mean_i log(‖ŷ_i − y*_i‖² / ‖x_i − y*_i‖²)`.
pub fn relative_transport_error(
    preds: ArrayView2<f64>,
    queries: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<TransportError> {
    if preds.dim() != queries.dim() || preds.dim() != targets.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: preds {:?}, queries {:?}, targets {:?}",
            preds.dim(),
            queries.dim(),
            targets.dim()
        )));
    }
    if preds.nrows() == 0 {
        return Err(Error::invalid("no rows to evaluate"));
    }
    let mut total = 0.0;
    let mut flagged = 0;
    for ((p, q), t) in preds.rows().into_iter().zip(queries.rows()).zip(targets.rows()) {
        let (v, flag) = log_ratio(&p.to_vec(), &q.to_vec(), &t.to_vec());
        total += v;
        flagged += flag as usize;
    }
    Ok(TransportError {
        e_rel: total / preds.nrows() as f64,
        flagged,
    })
}

fn sq_dist_key(pred: &[f64], key: &[f32]) -> f64 {
    pred.iter()
        .zip(key)
        .map(|(&p, &k)| {
            let t = p - k as f64;
            t * t
        })
        .sum()
}

/// 1-based position of `target` in the ascending-distance ranking of
/// `candidates` (all keys when `None`) from `pred`; ties go to the lower
/// index.
pub fn target_rank(
    pred: &[f64],
    keys: &EmbeddingStore,
    target: usize,
    candidates: Option<&[usize]>,
) -> Result<usize> {
    Error::check_dim(keys.dim(), pred.len())?;
    if keys.is_empty() {
        return Err(Error::invalid("empty key set"));
    }
    if target >= keys.rows() {
        return Err(Error::invalid(format!("target index {target} out of range")));
    }
    let dt = sq_dist_key(pred, keys.row(target));
    let ahead = |i: usize| {
        let di = sq_dist_key(pred, keys.row(i));
        di < dt || (di == dt && i < target)
    };
    let before = match candidates {
        Some(c) => c.iter().filter(|&&i| i != target && ahead(i)).count(),
        None => (0..keys.rows()).filter(|&i| i != target && ahead(i)).count(),
    };
    Ok(before + 1)
}

/// Ranks for every row of `preds` against all keys.
pub fn ranks(preds: ArrayView2<f64>, keys: &EmbeddingStore, targets: &[usize]) -> Result<Vec<usize>> {
    if preds.nrows() != targets.len() {
        return Err(Error::invalid("one target per prediction row required"));
    }
    (0..preds.nrows())
        .into_par_iter()
        .map(|i| target_rank(&preds.row(i).to_vec(), keys, targets[i], None))
        .collect()
}

pub fn match_rate(preds: ArrayView2<f64>, keys: &EmbeddingStore, targets: &[usize]) -> Result<f64> {
    recall_at_k(preds, keys, targets, 1)
}

pub fn recall_at_k(
    preds: ArrayView2<f64>,
    keys: &EmbeddingStore,
    targets: &[usize],
    k: usize,
) -> Result<f64> {
    Ok(recall_from_ranks(&ranks(preds, keys, targets)?, k))
}

pub fn mrr(preds: ArrayView2<f64>, keys: &EmbeddingStore, targets: &[usize]) -> Result<f64> {
    Ok(mrr_from_ranks(&ranks(preds, keys, targets)?))
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mrr_from_ranks(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub e_rel: f64,
    pub rte: f64,
    pub match_rate: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    /// Rows whose query coincided with its target.
    pub flagged: usize,
}

impl MetricReport {
    pub fn from_parts(te: TransportError, ranks: &[usize]) -> Self {
        Self {
            e_rel: te.e_rel,
            rte: te.rte(),
            match_rate: recall_from_ranks(ranks, 1),
            recall_at: REPORT_KS
                .iter()
                .map(|&k| (k, recall_from_ranks(ranks, k)))
                .collect(),
            mrr: mrr_from_ranks(ranks),
            flagged: te.flagged,
        }
    }

    pub fn csv_header() -> &'static str {
        "e_rel,rte,match_rate,recall@1,recall@5,recall@10,recall@100,mrr"
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.e_rel, self.rte, self.match_rate];
        cols.extend(REPORT_KS.iter().map(|k| self.recall_at[k]));
        cols.push(self.mrr);
        cols.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Metrics of a model's predicted keys. With `c > 1` clusters each
/// `(query, cluster)` prediction is scored against its own cluster's target
/// and ranked among that cluster's members, and everything is averaged over
/// the pairs.
pub fn evaluate_model(
    model: &Model,
    queries: &EmbeddingStore,
    keys: &EmbeddingStore,
    targets: &TargetSet,
    partition: Option<&Partition>,
) -> Result<MetricReport> {
    evaluate_params(&model.spec, &model.params, queries, keys, targets, partition)
}

pub(crate) fn evaluate_params(
    spec: &NetSpec,
    params: &crate::nets::NetParams,
    queries: &EmbeddingStore,
    keys: &EmbeddingStore,
    targets: &TargetSet,
    partition: Option<&Partition>,
) -> Result<MetricReport> {
    let c = spec.clusters;
    if targets.cluster_count() != c || targets.query_count() != queries.rows() {
        return Err(Error::invalid(format!(
            "targets cover {}×{} (queries×clusters), expected {}×{c}",
            targets.query_count(),
            targets.cluster_count(),
            queries.rows()
        )));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    let members = match partition {
        Some(p) if c > 1 => {
            if p.cluster_count() != c {
                return Err(Error::invalid("partition and model disagree on cluster count"));
            }
            Some(p.members())
        }
        None if c > 1 => return Err(Error::invalid("clustered model needs its partition")),
        _ => None,
    };
    let x = queries.to_f64();
    let pred = predict_keys_batch(spec, params, x.view())?;
    let per_pair: Vec<(f64, bool, usize)> = (0..queries.rows() * c)
        .into_par_iter()
        .map(|pair| {
            let (i, j) = (pair / c, pair % c);
            let p = pred.index_axis(Axis(0), i).row(j).to_vec();
            let t = targets.key_index(i, j);
            let tv: Vec<f64> = keys.row(t).iter().map(|&v| v as f64).collect();
            let (lr, flag) = log_ratio(&p, &x.row(i).to_vec(), &tv);
            let cand = members.as_ref().map(|m| m[j].as_slice());
            Ok((lr, flag, target_rank(&p, keys, t, cand)?))
        })
        .collect::<Result<_>>()?;
    let te = TransportError {
        e_rel: per_pair.iter().map(|p| p.0).sum::<f64>() / per_pair.len() as f64,
        flagged: per_pair.iter().filter(|p| p.1).count(),
    };
    let rk: Vec<usize> = per_pair.iter().map(|p| p.2).collect();
    Ok(MetricReport::from_parts(te, &rk))
}

/// Flops of one forward pass: two per multiply-add over the input
/// projections, hidden-to-hidden products and output layer.
pub fn flops_model_forward(spec: &NetSpec) -> u64 {
    let (h, d, l, o) = (
        spec.width as u64,
        spec.input_dim as u64,
        spec.depth as u64,
        spec.out_dim() as u64,
    );
    2 * ((1 + spec.reinject as u64) * d * h + (l - 1) * h * h + h * o)
}

/// Forward plus backward, fixed at twice the forward cost.
pub fn flops_model_gradient(spec: &NetSpec) -> u64 {
    2 * flops_model_forward(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostPoint {
    /// Mean flops per query.
    pub flops: f64,
    pub accuracy: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostCurve {
    pub points: Vec<CostPoint>,
}

impl CostCurve {
    pub fn push(&mut self, flops: f64, accuracy: f64, label: impl Into<String>) {
        self.points.push(CostPoint {
            flops,
            accuracy,
            label: label.into(),
        });
    }

    /// Best accuracy among points costing at most `budget` flops.
    pub fn best_within(&self, budget: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.flops <= budget)
            .map(|p| p.accuracy)
            .max_by(f64::total_cmp)
    }
}
