//! Losses, parameter gradients, Adam with a warmup-cosine schedule, and
//! parameter EMA.
//!
//! Both families are trained against precomputed targets: per query and
//! cluster the optimal key `y*_j(x)` and support value `σ_j(x)`.
//!
//! ```text
//! SupportNet  λ_score·mean_j (f_j − σ_j)²  +  λ_grad·mean_j ‖∇_x f_j − y*_j‖²  +  λ_nonneg·Σ relu(−W)²
//! KeyNet      λ_key·mean_j ‖F_j − y*_j‖²   +  λ_consist·mean_j (⟨F_j, x⟩ − σ_j)²
//! ```
//!
//! The gradient-matching term needs the derivative of `∇_x f` with respect to
//! the weights. The network's input-gradient sweep is recorded on the tape
//! like any other computation, so one reverse pass over it gives that
//! second-order path exactly.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::evalkit::evaluate_params;
use crate::nets::{nonneg_penalty, Family, NetParams, NetSpec};
use crate::oracle::TargetSet;
use crate::partition::Partition;
use crate::vecstore::EmbeddingStore;

/// Rows per gradient chunk; chunks are evaluated in parallel and summed in
/// order.
const CHUNK_ROWS: usize = 32;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub score: f64,
    pub grad: f64,
    pub key: f64,
    pub consist: f64,
    pub nonneg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            score: 0.01,
            grad: 1.0,
            key: 1.0,
            consist: 0.01,
            nonneg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.score, self.grad, self.key, self.consist, self.nonneg];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Training rows: queries with their per-cluster targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B×d`.
    pub queries: Array2<f64>,
    /// `B×(c·d)`, cluster-major within a row.
    pub target_keys: Array2<f64>,
    /// `B×c`.
    pub target_values: Array2<f64>,
}

impl Batch {
    pub fn from_targets(queries: &EmbeddingStore, keys: &EmbeddingStore, targets: &TargetSet) -> Result<Self> {
        Error::check_dim(keys.dim(), queries.dim())?;
        if targets.query_count() != queries.rows() {
            return Err(Error::invalid(format!(
                "{} target rows for {} queries",
                targets.query_count(),
                queries.rows()
            )));
        }
        let (n, c, d) = (queries.rows(), targets.cluster_count(), queries.dim());
        let mut target_keys = Array2::zeros((n, c * d));
        let mut target_values = Array2::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                let k = targets.key_index(i, j);
                if k >= keys.rows() {
                    return Err(Error::invalid(format!("target key {k} out of range")));
                }
                for (dst, &v) in target_keys
                    .slice_mut(s![i, j * d..(j + 1) * d])
                    .iter_mut()
                    .zip(keys.row(k))
                {
                    *dst = v as f64;
                }
                target_values[[i, j]] = targets.support_value(i, j);
            }
        }
        Ok(Self {
            queries: queries.to_f64(),
            target_keys,
            target_values,
        })
    }

    pub fn rows(&self) -> usize {
        self.queries.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.target_values.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            queries: self.queries.select(Axis(0), rows),
            target_keys: self.target_keys.select(Axis(0), rows),
            target_values: self.target_values.select(Axis(0), rows),
        }
    }

    fn slice_rows(&self, from: usize, to: usize) -> Batch {
        Batch {
            queries: self.queries.slice(s![from..to, ..]).to_owned(),
            target_keys: self.target_keys.slice(s![from..to, ..]).to_owned(),
            target_values: self.target_values.slice(s![from..to, ..]).to_owned(),
        }
    }

    fn check(&self, spec: &NetSpec) -> Result<()> {
        Error::check_dim(spec.input_dim, self.queries.ncols())?;
        if self.clusters() != spec.clusters || self.target_keys.ncols() != spec.clusters * spec.input_dim {
            return Err(Error::invalid(format!(
                "targets have {} clusters, model has {}",
                self.clusters(),
                spec.clusters
            )));
        }
        if self.rows() == 0 || self.target_keys.nrows() != self.rows() || self.target_values.nrows() != self.rows() {
            return Err(Error::invalid("batch is empty or ragged"));
        }
        Ok(())
    }
}

/// Loss value and its unweighted parts; parts that do not apply to the
/// family are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub score: Option<f64>,
    pub grad: Option<f64>,
    pub key: Option<f64>,
    pub consist: Option<f64>,
    pub nonneg: Option<f64>,
}

fn add_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x + y),
        (x, None) => x,
        (None, y) => y,
    }
}

impl LossParts {
    fn merge(self, o: LossParts) -> LossParts {
        LossParts {
            total: self.total + o.total,
            score: add_opt(self.score, o.score),
            grad: add_opt(self.grad, o.grad),
            key: add_opt(self.key, o.key),
            consist: add_opt(self.consist, o.consist),
            nonneg: add_opt(self.nonneg, o.nonneg),
        }
    }
}

struct LayerVars {
    hidden: Option<Var>,
    input: Option<Var>,
    bias: Var,
}

struct ParamVars {
    layers: Vec<LayerVars>,
    out_weight: Var,
    out_bias: Var,
}

fn row_vec(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(0))
}

fn load_params(t: &mut Tape, p: &NetParams) -> ParamVars {
    let layers = p
        .layers
        .iter()
        .map(|l| LayerVars {
            hidden: l.hidden.as_ref().map(|w| t.param(w.clone())),
            input: l.input.as_ref().map(|w| t.param(w.clone())),
            bias: t.param(row_vec(&l.bias)),
        })
        .collect();
    ParamVars {
        layers,
        out_weight: t.param(p.out_weight.clone()),
        out_bias: t.param(row_vec(&p.out_bias)),
    }
}

fn check_finite(t: &Tape, v: Var, layer: usize, what: &str) -> Result<()> {
    if t.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            detail: format!("non-finite {what}"),
        })
    }
}

/// Records the base network on `x`; returns the output and every hidden
/// pre-activation.
fn record_forward(t: &mut Tape, spec: &NetSpec, pv: &ParamVars, x: Var) -> Result<(Var, Vec<Var>)> {
    let (a, b) = (spec.alpha, spec.beta);
    let mut z: Option<Var> = None;
    let mut pres = Vec::with_capacity(spec.depth);
    for (i, l) in pv.layers.iter().enumerate() {
        let mut pre = match (l.hidden, z) {
            (Some(wz), Some(zv)) => Some(t.matmul_t(zv, wz)),
            _ => None,
        };
        if let Some(wx) = l.input {
            let px = t.matmul_t(x, wx);
            pre = Some(match pre {
                Some(p) => t.add(p, px),
                None => px,
            });
        }
        let pre = pre.expect("every layer reads x or the previous layer");
        let pre = t.add_row(pre, l.bias);
        check_finite(t, pre, i, "pre-activation")?;
        let act = t.act(pre, a, b);
        z = Some(match z {
            Some(prev) if i > 0 && spec.residual => t.add(prev, act),
            _ => act,
        });
        pres.push(pre);
    }
    let out = t.matmul_t(z.expect("depth ≥ 1"), pv.out_weight);
    let out = t.add_row(out, pv.out_bias);
    check_finite(t, out, spec.depth, "output")?;
    Ok((out, pres))
}

/// Records `∂ out_j / ∂x` of the base network for every output `j`, each
/// `B×d`.
fn record_input_gradients(t: &mut Tape, spec: &NetSpec, pv: &ParamVars, pres: &[Var], rows: usize) -> Vec<Var> {
    let (a, b) = (spec.alpha, spec.beta);
    let d1: Vec<Var> = pres.iter().map(|&p| t.act_d1(p, a, b)).collect();
    let zeros = t.constant(Array2::zeros((rows, spec.width)));
    (0..spec.out_dim())
        .map(|j| {
            let seed = t.row(pv.out_weight, j);
            let mut delta = t.add_row(zeros, seed);
            let mut gx: Option<Var> = None;
            for i in (0..spec.depth).rev() {
                let dpre = t.mul(delta, d1[i]);
                let l = &pv.layers[i];
                if let Some(wx) = l.input {
                    let contrib = t.matmul(dpre, wx);
                    gx = Some(match gx {
                        Some(g) => t.add(g, contrib),
                        None => contrib,
                    });
                }
                if let Some(wz) = l.hidden {
                    let back = t.matmul(dpre, wz);
                    delta = if spec.residual { t.add(delta, back) } else { back };
                }
            }
            gx.expect("layer 0 reads x")
        })
        .collect()
}

/// Unweighted sums of squared residuals, each divided by `denom`.
struct Recorded {
    total: Var,
    parts: LossParts,
    params: ParamVars,
}

fn record_supportnet(
    t: &mut Tape,
    spec: &NetSpec,
    p: &NetParams,
    batch: &Batch,
    w: &LossWeights,
    denom: f64,
) -> Result<Recorded> {
    let (rows, d) = (batch.rows(), spec.input_dim);
    let pv = load_params(t, p);
    // x is data, so the unit direction and norm are constants of the graph
    let (input, norms) = if spec.homogenize {
        let n = batch.queries.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = n.iter().position(|&v| v == 0.0) {
            return Err(Error::Degenerate {
                row: i,
                detail: "homogenized network evaluated at the origin".into(),
            });
        }
        let n = n.insert_axis(Axis(1));
        (&batch.queries / &n, Some(n))
    } else {
        (batch.queries.clone(), None)
    };
    let u = t.constant(input);
    let (g, pres) = record_forward(t, spec, &pv, u)?;
    let raw_grads = record_input_gradients(t, spec, &pv, &pres, rows);
    let (f, grads) = match norms {
        None => (g, raw_grads),
        Some(n) => {
            let nv = t.constant(n);
            let f = t.mul_col(g, nv);
            let grads = raw_grads
                .into_iter()
                .enumerate()
                .map(|(j, gg)| {
                    // g_j(u)·u + ∇g_j − (u·∇g_j)·u
                    let gj = t.col(g, j);
                    let along = t.mul(gg, u);
                    let along = t.row_sum(along);
                    let coef = t.sub(gj, along);
                    let radial = t.mul_col(u, coef);
                    t.add(gg, radial)
                })
                .collect();
            (f, grads)
        }
    };
    let sigma = t.constant(batch.target_values.clone());
    let diff = t.sub(f, sigma);
    let sq = t.square(diff);
    let score = t.sum_all(sq);
    let mut grad_sum: Option<Var> = None;
    for (j, gj) in grads.into_iter().enumerate() {
        let target = t.constant(batch.target_keys.slice(s![.., j * d..(j + 1) * d]).to_owned());
        let e = t.sub(gj, target);
        let e = t.square(e);
        let e = t.sum_all(e);
        grad_sum = Some(match grad_sum {
            Some(acc) => t.add(acc, e),
            None => e,
        });
    }
    let grad_sum = grad_sum.expect("c ≥ 1");
    check_finite(t, grad_sum, 0, "input gradient")?;
    let ws = t.scale(score, w.score / denom);
    let wg = t.scale(grad_sum, w.grad / denom);
    let total = t.add(ws, wg);
    let parts = LossParts {
        total: t.scalar(total),
        score: Some(t.scalar(score) / denom),
        grad: Some(t.scalar(grad_sum) / denom),
        ..Default::default()
    };
    Ok(Recorded {
        total,
        parts,
        params: pv,
    })
}

fn record_keynet(
    t: &mut Tape,
    spec: &NetSpec,
    p: &NetParams,
    batch: &Batch,
    w: &LossWeights,
    denom: f64,
) -> Result<Recorded> {
    let (c, d) = (spec.clusters, spec.input_dim);
    let pv = load_params(t, p);
    let x = t.constant(batch.queries.clone());
    let (out, _) = record_forward(t, spec, &pv, x)?;
    let target = t.constant(batch.target_keys.clone());
    let e = t.sub(out, target);
    let e = t.square(e);
    let key = t.sum_all(e);
    // ⟨F_j, x⟩ for all j: F ⊙ [x … x] summed per block of d columns
    let tiled = t.constant(ndarray::concatenate(Axis(1), &vec![batch.queries.view(); c]).expect("same rows"));
    let blocks = t.constant(Array2::from_shape_fn((c * d, c), |(k, j)| (k / d == j) as u8 as f64));
    let prod = t.mul(out, tiled);
    let scores = t.matmul(prod, blocks);
    let sigma = t.constant(batch.target_values.clone());
    let diff = t.sub(scores, sigma);
    let sq = t.square(diff);
    let consist = t.sum_all(sq);
    let wk = t.scale(key, w.key / denom);
    let wc = t.scale(consist, w.consist / denom);
    let total = t.add(wk, wc);
    let parts = LossParts {
        total: t.scalar(total),
        key: Some(t.scalar(key) / denom),
        consist: Some(t.scalar(consist) / denom),
        ..Default::default()
    };
    Ok(Recorded {
        total,
        parts,
        params: pv,
    })
}

fn record(t: &mut Tape, spec: &NetSpec, p: &NetParams, batch: &Batch, w: &LossWeights, denom: f64) -> Result<Recorded> {
    match spec.family {
        Family::SupportNet => record_supportnet(t, spec, p, batch, w, denom),
        Family::KeyNet => record_keynet(t, spec, p, batch, w, denom),
    }
}

fn extract(g: &Gradients, pv: &ParamVars, like: &NetParams) -> NetParams {
    let mut out = like.zeros_like();
    let take = |v: Var, dst: &mut [f64]| {
        if let Some(a) = g.get(v) {
            dst.copy_from_slice(a.as_slice().expect("standard layout"));
        }
    };
    for (lv, lo) in pv.layers.iter().zip(&mut out.layers) {
        if let (Some(v), Some(w)) = (lv.hidden, &mut lo.hidden) {
            take(v, w.as_slice_mut().expect("standard layout"));
        }
        if let (Some(v), Some(w)) = (lv.input, &mut lo.input) {
            take(v, w.as_slice_mut().expect("standard layout"));
        }
        take(lv.bias, lo.bias.as_slice_mut().expect("standard layout"));
    }
    take(pv.out_weight, out.out_weight.as_slice_mut().expect("standard layout"));
    take(pv.out_bias, out.out_bias.as_slice_mut().expect("standard layout"));
    out
}

fn add_scaled(acc: &mut NetParams, other: &NetParams, k: f64) {
    for (a, b) in acc.slices_mut().into_iter().zip(other.slices()) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
    }
}

fn prepare(spec: &NetSpec, p: &NetParams, batch: &Batch, w: &LossWeights) -> Result<f64> {
    spec.validate()?;
    p.check_shapes(spec)?;
    w.validate()?;
    batch.check(spec)?;
    Ok((batch.rows() * spec.clusters) as f64)
}

fn finish_penalty(spec: &NetSpec, p: &NetParams, w: &LossWeights, mut parts: LossParts) -> (LossParts, NetParams) {
    let (pen, pen_grad) = nonneg_penalty(spec, p);
    if spec.family == Family::SupportNet {
        parts.nonneg = Some(pen);
        parts.total += w.nonneg * pen;
    }
    (parts, pen_grad)
}

fn loss_only(spec: &NetSpec, p: &NetParams, batch: &Batch, w: &LossWeights) -> Result<LossParts> {
    let denom = prepare(spec, p, batch, w)?;
    let mut t = Tape::new();
    let rec = record(&mut t, spec, p, batch, w, denom)?;
    Ok(finish_penalty(spec, p, w, rec.parts).0)
}

pub fn loss_supportnet(spec: &NetSpec, p: &NetParams, batch: &Batch, w: &LossWeights) -> Result<LossParts> {
    if spec.family != Family::SupportNet {
        return Err(Error::invalid("loss_supportnet needs a SupportNet spec"));
    }
    loss_only(spec, p, batch, w)
}

pub fn loss_keynet(spec: &NetSpec, p: &NetParams, batch: &Batch, w: &LossWeights) -> Result<LossParts> {
    if spec.family != Family::KeyNet {
        return Err(Error::invalid("loss_keynet needs a KeyNet spec"));
    }
    loss_only(spec, p, batch, w)
}

/// Loss of either family.
pub fn loss(spec: &NetSpec, p: &NetParams, batch: &Batch, w: &LossWeights) -> Result<LossParts> {
    loss_only(spec, p, batch, w)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradients(
    spec: &NetSpec,
    p: &NetParams,
    batch: &Batch,
    w: &LossWeights,
) -> Result<(LossParts, NetParams)> {
    let denom = prepare(spec, p, batch, w)?;
    let bounds: Vec<(usize, usize)> = (0..batch.rows())
        .step_by(CHUNK_ROWS)
        .map(|s| (s, (s + CHUNK_ROWS).min(batch.rows())))
        .collect();
    let pieces: Vec<(LossParts, NetParams)> = bounds
        .par_iter()
        .map(|&(from, to)| {
            let chunk = batch.slice_rows(from, to);
            let mut t = Tape::new();
            let rec = record(&mut t, spec, p, &chunk, w, denom)?;
            let g = t.backward(rec.total);
            Ok((rec.parts, extract(&g, &rec.params, p)))
        })
        .collect::<Result<_>>()?;
    let mut parts = LossParts::default();
    let mut grads = p.zeros_like();
    for (pp, g) in &pieces {
        parts = parts.merge(*pp);
        add_scaled(&mut grads, g, 1.0);
    }
    let (parts, pen_grad) = finish_penalty(spec, p, w, parts);
    add_scaled(&mut grads, &pen_grad, w.nonneg);
    if !grads.all_finite() {
        return Err(Error::Numeric {
            layer: spec.depth,
            detail: "non-finite parameter gradient".into(),
        });
    }
    Ok((parts, grads))
}

pub fn param_gradients(spec: &NetSpec, p: &NetParams, batch: &Batch, w: &LossWeights) -> Result<NetParams> {
    Ok(loss_and_gradients(spec, p, batch, w)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Peak learning rate at the reference batch size.
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub reference_batch: usize,
    /// EMA decay at the reference batch size.
    pub ema_decay_ref: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_fraction: 0.025,
            total_steps: 5000,
            batch_size: 128,
            reference_batch: 128,
            ema_decay_ref: 0.999,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid("warmup fraction must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.reference_batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::invalid("peak learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay_ref) {
            return Err(Error::invalid("EMA decay must lie in [0, 1]"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("logging interval must be positive"));
        }
        Ok(())
    }

    /// Peak rate after square-root batch scaling.
    pub fn scaled_peak(&self) -> f64 {
        self.peak_lr * (self.batch_size as f64 / self.reference_batch as f64).sqrt()
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).min(self.total_steps)
    }
}

/// Linear ramp to the scaled peak, then cosine decay to zero at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.scaled_peak();
    let (warm, total) = (cfg.warmup_steps(), cfg.total_steps);
    let step = step.min(total);
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if total == warm {
        return peak;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `ema_decay_ref^(B / B_ref)`.
pub fn ema_decay_at(batch_size: usize, cfg: &TrainConfig) -> f64 {
    cfg.ema_decay_ref
        .powf(batch_size as f64 / cfg.reference_batch as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: NetParams,
    pub v: NetParams,
    pub t: u64,
    pub ema: NetParams,
    pub ema_decay: f64,
}

impl OptimizerState {
    /// Zero moments; the EMA shadow starts at `params`.
    pub fn new(params: &NetParams, ema_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            ema: params.clone(),
            ema_decay,
        }
    }
}

/// One bias-corrected Adam update followed by the EMA update.
pub fn adam_step(state: &mut OptimizerState, params: &mut NetParams, grads: &NetParams, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("gradient shapes do not match the parameters"));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric {
            layer: 0,
            detail: "non-finite gradient passed to the optimizer".into(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let decay = state.ema_decay;
    let tensors = params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut())
        .zip(state.ema.slices_mut());
    for ((((p, g), m), v), e) in tensors {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            e[i] = decay * e[i] + (1.0 - decay) * p[i];
        }
    }
    Ok(())
}

/// Held-out data scored with the EMA parameters at every log point.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub queries: &'a EmbeddingStore,
    pub keys: &'a EmbeddingStore,
    pub targets: &'a TargetSet,
    pub partition: Option<&'a Partition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    /// Batch losses averaged over the steps since the previous row.
    pub loss: LossParts,
    pub val_erel: Option<f64>,
    pub val_match_rate: Option<f64>,
}

pub const HISTORY_HEADER: &str =
    "step,lr,loss_total,loss_score,loss_grad,loss_key,loss_consist,loss_nonneg,val_erel,val_match_rate";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.lr,
            l.total,
            opt_field(l.score),
            opt_field(l.grad),
            opt_field(l.key),
            opt_field(l.consist),
            opt_field(l.nonneg),
            opt_field(r.val_erel),
            opt_field(r.val_match_rate)
        );
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub ema: NetParams,
    pub history: Vec<HistoryRow>,
}

/// A permutation of `0..n` fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct BatchStream {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            size: size.min(n),
            seed,
            epoch: 0,
            order: epoch_order(n, seed, 0),
            pos: 0,
        }
    }

    /// Next batch of row indices; a short tail starts a new epoch.
    fn next_rows(&mut self) -> &[usize] {
        if self.pos + self.size > self.n {
            self.epoch += 1;
            self.order = epoch_order(self.n, self.seed, self.epoch);
            self.pos = 0;
        }
        let rows = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        rows
    }
}

fn scale_parts(p: LossParts, k: f64) -> LossParts {
    LossParts {
        total: p.total * k,
        score: p.score.map(|v| v * k),
        grad: p.grad.map(|v| v * k),
        key: p.key.map(|v| v * k),
        consist: p.consist.map(|v| v * k),
        nonneg: p.nonneg.map(|v| v * k),
    }
}

/// Adam on shuffled mini-batches. Deterministic for a fixed seed.
pub fn train_model(
    spec: &NetSpec,
    init: &NetParams,
    data: &Batch,
    cfg: &TrainConfig,
    w: &LossWeights,
    val: Option<&Validation>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    init.check_shapes(spec)?;
    data.check(spec)?;
    let mut params = init.clone();
    let mut state = OptimizerState::new(init, ema_decay_at(cfg.batch_size, cfg));
    let mut stream = BatchStream::new(data.rows(), cfg.batch_size, cfg.seed);
    let mut history = Vec::new();
    let mut window = LossParts::default();
    let mut window_len = 0usize;
    for step in 1..=cfg.total_steps {
        let batch = data.select(stream.next_rows());
        let (parts, grads) = loss_and_gradients(spec, &params, &batch, w)?;
        let lr = lr_at(step, cfg);
        adam_step(&mut state, &mut params, &grads, lr)?;
        window = window.merge(parts);
        window_len += 1;
        if step % cfg.log_every == 0 || step == cfg.total_steps {
            let (val_erel, val_match_rate) = match val {
                Some(v) => {
                    let r = evaluate_params(spec, &state.ema, v.queries, v.keys, v.targets, v.partition)?;
                    (Some(r.e_rel), Some(r.match_rate))
                }
                None => (None, None),
            };
            history.push(HistoryRow {
                step,
                lr,
                loss: scale_parts(window, 1.0 / window_len as f64),
                val_erel,
                val_match_rate,
            });
            window = LossParts::default();
            window_len = 0;
        }
    }
    Ok(TrainOutcome {
        params,
        ema: state.ema,
        history,
    })
}
