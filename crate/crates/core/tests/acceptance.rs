//! Acceptance suite. Runs every criterion in order on the synthetic
//! clustered fixture, prints one PASS/FAIL line each and exits non-zero if
//! any fails.
//!
//! Criteria run sequentially so the timing measurement never competes with
//! training for cores.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use amips_core::evalkit::evaluate_model;
use amips_core::ivf::{build_ivf, nprobe_sweep, ood_sweep, search_ivf, QueryStrategy};
use amips_core::nets::sizing::{solve_width, BudgetSpec, ReinjectPolicy, SizeTag};
use amips_core::nets::{
    forward, forward_batch, init_params, input_gradient, input_gradient_batch, predict_keys_batch, score_batch,
    Family, Model, NetParams, NetSpec,
};
use amips_core::oracle::{build_global_targets, build_targets, support_and_argmax, top_k};
use amips_core::partition::{select_balanced, Partition, DEFAULT_MAX_ITERS};
use amips_core::router::{routing_curve, RouteRow, Scorer};
use amips_core::synth::{mixture, Mixture, MixtureConfig};
use amips_core::train::{loss, param_gradients, train_model, Batch, LossWeights, TrainConfig, Validation};
use amips_core::vecstore::{augment_queries, AugmentConfig, EmbeddingStore, StoreKind};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FIXTURE_DEPTH: usize = 4;
/// Peak learning rate at batch 128 for fixture runs.
const FIXTURE_LR: f64 = 2e-2;
const FIXTURE_STEPS: usize = 5000;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Fixture {
    data: Mixture,
    train: EmbeddingStore,
    /// KeyNet of size M trained on global targets, EMA weights.
    keynet_m: Option<Model>,
}

impl Fixture {
    fn new() -> Self {
        let data = mixture(&MixtureConfig::default()).expect("fixture");
        let train = augment_queries(&data.train, &AugmentConfig::default()).expect("augmentation");
        Self {
            data,
            train,
            keynet_m: None,
        }
    }

    fn spec(&self, family: Family, tag: SizeTag, clusters: usize) -> NetSpec {
        let reinject = ReinjectPolicy::EveryLayer.count(FIXTURE_DEPTH);
        let b = BudgetSpec {
            rho: tag.fraction(),
            n: self.data.keys.rows(),
            d: self.data.keys.dim(),
            depth: FIXTURE_DEPTH,
            reinject,
        };
        let mut s = NetSpec::new(family, FIXTURE_DEPTH, solve_width(&b).unwrap(), b.d, clusters);
        s.reinject = reinject;
        s.residual = true;
        s.homogenize = family == Family::SupportNet;
        s
    }

    fn train(&self, spec: &NetSpec, partition: &Partition, with_history: bool) -> (Model, Vec<amips_core::train::HistoryRow>) {
        let tt = build_targets(&self.train, &self.data.keys, partition).unwrap();
        let vt = build_targets(&self.data.val, &self.data.keys, partition).unwrap();
        let batch = Batch::from_targets(&self.train, &self.data.keys, &tt).unwrap();
        let cfg = TrainConfig {
            peak_lr: FIXTURE_LR,
            total_steps: FIXTURE_STEPS,
            ..Default::default()
        };
        let val = Validation {
            queries: &self.data.val,
            keys: &self.data.keys,
            targets: &vt,
            partition: Some(partition),
        };
        let init = init_params(spec, 0);
        let out = train_model(
            spec,
            &init,
            &batch,
            &cfg,
            &LossWeights::default(),
            with_history.then_some(&val),
        )
        .unwrap();
        (Model::new(spec.clone(), out.ema).unwrap(), out.history)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_store(rng: &mut ChaCha8Rng, rows: usize, dim: usize, kind: StoreKind) -> EmbeddingStore {
    // coarse grid values make exact ties common
    let data = (0..rows * dim)
        .map(|_| rng.random_range(-4i32..=4) as f32 * 0.25)
        .collect();
    EmbeddingStore::new(rows, dim, data, kind).unwrap()
}

fn criterion_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=1000);
        let d = rng.random_range(1..=32);
        let keys = random_store(&mut rng, n, d, StoreKind::Key);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-4i32..=4) as f64 * 0.5).collect();
        // naive double loop
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                s += q[j] * keys.row(i)[j] as f64;
            }
            scores.push(s);
        }
        let mut best = 0;
        for i in 1..n {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        let (v, idx) = support_and_argmax(&q, &keys, None).unwrap();
        if idx != best || v != scores[best] {
            mismatches += 1;
        }
        let k = rng.random_range(1..=n.min(50));
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for j in 0..n - 1 - i {
                let (a, b) = (order[j], order[j + 1]);
                if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                    order.swap(j, j + 1);
                }
            }
        }
        let got: Vec<usize> = top_k(&q, &keys, k).unwrap().into_iter().map(|(i, _)| i).collect();
        if got != order[..k] {
            mismatches += 1;
        }
    }
    Verdict::new(mismatches == 0, format!("100 instances, {mismatches} mismatches"))
}

fn random_params(spec: &NetSpec, rng: &mut ChaCha8Rng) -> NetParams {
    let mut p = init_params(spec, rng.random());
    // flipping signs puts some convexity weights below zero without changing scale
    for s in p.slices_mut() {
        for v in s.iter_mut() {
            if rng.random_bool(0.2) {
                *v = -*v;
            }
            *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, d: usize, c: usize) -> Batch {
    let mut gen = |r: usize, k: usize| Array2::from_shape_vec((r, k), gaussian_vec(rng, r * k)).unwrap();
    Batch {
        queries: gen(rows, d),
        target_keys: gen(rows, c * d),
        target_values: gen(rows, c),
    }
}

/// Indices to probe: up to `per_tensor` per tensor, always including each
/// tensor's first and last entry.
fn probe_indices(p: &NetParams, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut off = 0;
    for s in p.slices() {
        let n = s.len();
        let mut picks = vec![0, n - 1];
        while picks.len() < per_tensor.min(n) {
            picks.push(rng.random_range(0..n));
        }
        picks.sort_unstable();
        picks.dedup();
        out.extend(picks.into_iter().map(|i| off + i));
        off += n;
    }
    out
}

fn criterion_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for inst in 0..40 {
        let family = if inst < 20 { Family::SupportNet } else { Family::KeyNet };
        let depth = if inst % 2 == 0 { 4 } else { 8 };
        let width = rng.random_range(4..=32);
        let d = rng.random_range(2..=6);
        let c = rng.random_range(1..=3);
        let mut spec = NetSpec::new(family, depth, width, d, c);
        spec.reinject = rng.random_range(0..depth);
        spec.residual = rng.random();
        spec.homogenize = family == Family::SupportNet && rng.random();
        let p = random_params(&spec, &mut rng);
        let batch = random_batch(&mut rng, 3, d, c);
        let zero = LossWeights {
            score: 0.0,
            grad: 0.0,
            key: 0.0,
            consist: 0.0,
            nonneg: 0.0,
        };
        let parts: Vec<LossWeights> = match family {
            Family::SupportNet => vec![
                LossWeights { score: 1.0, ..zero },
                LossWeights { grad: 1.0, ..zero },
                LossWeights { nonneg: 1.0, ..zero },
            ],
            Family::KeyNet => vec![LossWeights { key: 1.0, ..zero }, LossWeights { consist: 1.0, ..zero }],
        };
        let base = p.to_flat();
        let probes = probe_indices(&p, 12, &mut rng);
        for w in &parts {
            let g = param_gradients(&spec, &p, &batch, w).unwrap().to_flat();
            // central differences cannot resolve gradients below their own round-off
            let scale = loss(&spec, &p, &batch, w).unwrap().total.abs();
            let floor = (1e3 * f64::EPSILON * scale / step).max(1e-6);
            let mut q = p.clone();
            for &i in &probes {
                let mut x = base.clone();
                x[i] = base[i] + step;
                q.set_flat(&x);
                let up = loss(&spec, &q, &batch, w).unwrap().total;
                x[i] = base[i] - step;
                q.set_flat(&x);
                let down = loss(&spec, &q, &batch, w).unwrap().total;
                let fd = (up - down) / (2.0 * step);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(floor);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    Verdict::new(
        worst <= 1e-3,
        format!("40 nets, {checked} coordinates, worst relative error {worst:.2e}"),
    )
}

fn criterion_structure() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let mut spec = NetSpec::new(Family::SupportNet, 4, 24, d, 3);
    spec.reinject = 3;
    spec.residual = true;
    spec.homogenize = true;
    let p = random_params(&spec, &mut rng);
    let mut homog_err: f64 = 0.0;
    let mut euler_err: f64 = 0.0;
    for _ in 0..200 {
        let x = gaussian_vec(&mut rng, d);
        let f = forward(&spec, &p, &x).unwrap();
        for alpha in [0.5, 2.0, 10.0] {
            let xs: Vec<f64> = x.iter().map(|v| alpha * v).collect();
            let fs = forward(&spec, &p, &xs).unwrap();
            for (a, b) in fs.iter().zip(&f) {
                homog_err = homog_err.max((a - alpha * b).abs() / (alpha * b).abs().max(1.0));
            }
        }
        let g = input_gradient(&spec, &p, &x).unwrap();
        for (j, row) in g.axis_iter(Axis(0)).enumerate() {
            let e: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
            euler_err = euler_err.max((e - f[j]).abs());
        }
    }
    let mut plain = spec.clone();
    plain.homogenize = false;
    let clamped = p.clamped_nonneg();
    let mut violations = 0;
    for _ in 0..1000 {
        let x = gaussian_vec(&mut rng, d);
        let y = gaussian_vec(&mut rng, d);
        let t: f64 = rng.random();
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let (fx, fy, fm) = (
            forward(&plain, &clamped, &x).unwrap(),
            forward(&plain, &clamped, &y).unwrap(),
            forward(&plain, &clamped, &mid).unwrap(),
        );
        for j in 0..3 {
            if fm[j] > t * fx[j] + (1.0 - t) * fy[j] + 1e-8 {
                violations += 1;
            }
        }
    }
    Verdict::new(
        homog_err <= 1e-10 && euler_err <= 1e-6 && violations == 0,
        format!(
            "homogeneity error {homog_err:.1e}, Euler error {euler_err:.1e}, {violations} convexity violations in 1000 triples"
        ),
    )
}

fn criterion_sizing() -> Verdict {
    let (n, d) = (2048, 16);
    let mut failures = Vec::new();
    let mut worst: (f64, String) = (0.0, String::new());
    for tag in SizeTag::ALL {
        for depth in [4, 8, 16] {
            for policy in [ReinjectPolicy::EveryLayer, ReinjectPolicy::EveryFourth] {
                let reinject = policy.count(depth);
                let b = BudgetSpec {
                    rho: tag.fraction(),
                    n,
                    d,
                    depth,
                    reinject,
                };
                let width = solve_width(&b).unwrap();
                let mut spec = NetSpec::new(Family::SupportNet, depth, width, d, 1);
                spec.reinject = reinject;
                let realized: usize = NetParams::zeros(&spec).slices().iter().map(|s| s.len()).sum();
                let dev = (realized as f64 - b.budget()) / b.budget();
                let label = format!("{}/L={depth}/{} h={width} {:+.1}%", tag.name(), policy.name(), 100.0 * dev);
                if dev.abs() > worst.0 {
                    worst = (dev.abs(), label.clone());
                }
                if dev.abs() > 0.05 {
                    failures.push(label);
                }
            }
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{}/36 combinations outside 5% (worst {}); failing: {}",
            failures.len(),
            worst.1,
            failures.join(", ")
        ),
    )
}

fn criterion_training(fx: &mut Fixture) -> Verdict {
    let spec = fx.spec(Family::KeyNet, SizeTag::M, 1);
    let part = Partition::single(&fx.data.keys).unwrap();
    let (model, history) = fx.train(&spec, &part, true);
    let last = history.last().expect("history");
    let erel = last.val_erel.unwrap();
    let matched = last.val_match_rate.unwrap();
    let mut worst_rise = f64::NEG_INFINITY;
    for (i, a) in history.iter().enumerate() {
        for b in &history[i + 1..] {
            if b.step - a.step > 500 {
                break;
            }
            worst_rise = worst_rise.max(b.val_erel.unwrap() - a.val_erel.unwrap());
        }
    }
    let report = evaluate_model(&model, &fx.data.val, &fx.data.keys, &build_global_targets(&fx.data.val, &fx.data.keys).unwrap(), None).unwrap();
    fx.keynet_m = Some(model);
    Verdict::new(
        erel < -1.0 && matched >= 0.85 && worst_rise <= 0.2,
        format!(
            "h={} E_rel {erel:.3}, match rate {matched:.3}, MRR {:.3}, worst 500-step rise {worst_rise:.3}",
            spec.width, report.mrr
        ),
    )
}

/// Learned k=1 accuracy strictly above every baseline point that costs at
/// most as much.
fn dominates(learned: &RouteRow, baseline: &[&RouteRow]) -> bool {
    baseline
        .iter()
        .filter(|b| b.flops <= learned.flops)
        .all(|b| learned.routing_accuracy > b.routing_accuracy)
}

fn criterion_routing(fx: &Fixture) -> Verdict {
    let c = 10;
    let part = select_balanced(&fx.data.keys, c, 5, DEFAULT_MAX_ITERS, 0).unwrap();
    let mut models = Vec::new();
    for family in [Family::SupportNet, Family::KeyNet] {
        for tag in [SizeTag::S, SizeTag::M] {
            let spec = fx.spec(family, tag, c);
            models.push((fx.train(&spec, &part, false).0, tag.name()));
        }
    }
    let targets = build_global_targets(&fx.data.val, &fx.data.keys).unwrap();
    let mut scorers: Vec<(Scorer, &str)> = models.iter().map(|(m, t)| (Scorer::Learned(m), *t)).collect();
    scorers.push((Scorer::Centroid(&part), ""));
    let rows = routing_curve(&scorers, &fx.data.val, &targets, &part, c).unwrap();
    let baseline: Vec<&RouteRow> = rows.iter().filter(|r| r.scorer == "centroid").collect();
    let mut winners = Vec::new();
    let mut summary = Vec::new();
    for r in rows.iter().filter(|r| r.scorer != "centroid" && r.k_clusters == 1) {
        summary.push(format!("{}-{} {:.3}@{:.0}", r.scorer, r.model_size, r.routing_accuracy, r.flops));
        if dominates(r, &baseline) {
            winners.push(format!("{}-{}", r.scorer, r.model_size));
        }
    }
    let full_exact = rows.iter().filter(|r| r.k_clusters == c).all(|r| r.routing_accuracy == 1.0);
    Verdict::new(
        !winners.is_empty() && full_exact,
        format!(
            "k=1: {}; centroid k=1 {:.3}@{:.0}; dominating: [{}]; accuracy 1.0 at k=c: {full_exact}",
            summary.join(", "),
            baseline[0].routing_accuracy,
            baseline[0].flops,
            winners.join(", ")
        ),
    )
}

const PROBES: [usize; 6] = [1, 2, 4, 8, 16, 45];
const SWEEP_K: usize = 10;

fn criterion_ivf(fx: &Fixture) -> Verdict {
    let model = fx.keynet_m.as_ref().expect("trained KeyNet");
    let index = build_ivf(&fx.data.keys, 45, 0).unwrap();
    let targets = build_global_targets(&fx.data.val, &fx.data.keys).unwrap();
    let pts = nprobe_sweep(
        &index,
        &[(QueryStrategy::Natural, ""), (QueryStrategy::Mapped(model), "M")],
        &fx.data.val,
        &targets,
        &PROBES,
        SWEEP_K,
    )
    .unwrap();
    let at1 = |s: &str| pts.iter().find(|p| p.strategy == s && p.n_probe == 1).unwrap().recall;
    let (nat, map) = (at1("natural"), at1("mapped"));
    let mut disagreements = 0;
    for i in 0..fx.data.val.rows() {
        let x = fx.data.val.row_f64(i);
        if search_ivf(&index, &x, 45, SWEEP_K).unwrap().results != top_k(&x, &fx.data.keys, SWEEP_K).unwrap() {
            disagreements += 1;
        }
    }
    Verdict::new(
        map > nat && disagreements == 0,
        format!(
            "recall@{SWEEP_K} at n_probe=1: mapped {map:.3} vs natural {nat:.3}; full-probe disagreements {disagreements}/{}",
            fx.data.val.rows()
        ),
    )
}

fn median_time(mut f: impl FnMut()) -> Duration {
    for _ in 0..5 {
        f();
    }
    let mut t: Vec<Duration> = (0..20)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed()
        })
        .collect();
    t.sort();
    t[t.len() / 2]
}

fn criterion_timing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 16;
    let x = Array2::from_shape_vec((1024, d), gaussian_vec(&mut rng, 1024 * d)).unwrap();
    let mk = |family| {
        let mut s = NetSpec::new(family, 4, 24, d, 1);
        s.reinject = 3;
        s.residual = true;
        let p = init_params(&s, 1);
        (s, p)
    };
    let (ks, kp) = mk(Family::KeyNet);
    let (ss, sp) = mk(Family::SupportNet);
    let k_score = median_time(|| {
        std::hint::black_box(score_batch(&ks, &kp, x.view()).unwrap());
    });
    let k_keys = median_time(|| {
        std::hint::black_box(predict_keys_batch(&ks, &kp, x.view()).unwrap());
    });
    let s_score = median_time(|| {
        std::hint::black_box(forward_batch(&ss, &sp, x.view()).unwrap());
    });
    let s_grad = median_time(|| {
        std::hint::black_box(input_gradient_batch(&ss, &sp, x.view()).unwrap());
    });
    let kr = k_keys.as_secs_f64() / k_score.as_secs_f64();
    let sr = s_grad.as_secs_f64() / s_score.as_secs_f64();
    Verdict::new(
        (kr - 1.0).abs() <= 0.2 && sr >= 1.3,
        format!(
            "KeyNet keys/score {kr:.2} ({k_keys:?}/{k_score:?}), SupportNet gradient/score {sr:.2} ({s_grad:?}/{s_score:?})"
        ),
    )
}

fn criterion_ood(fx: &Fixture) -> Verdict {
    let model = fx.keynet_m.as_ref().expect("trained KeyNet");
    let index = build_ivf(&fx.data.keys, 45, 0).unwrap();
    let stds = [0.0, 0.1, 0.2];
    let rep = ood_sweep(
        &index,
        &[(QueryStrategy::Natural, ""), (QueryStrategy::Mapped(model), "M")],
        &fx.data.val,
        &stds,
        &PROBES,
        SWEEP_K,
        9,
    )
    .unwrap();
    let mrr = |std: f64, np: usize| {
        rep.points
            .iter()
            .find(|p| p.strategy == "mapped" && p.noise_std == std && p.n_probe == np)
            .unwrap()
            .mrr
    };
    let mut worst_rise = f64::NEG_INFINITY;
    for np in PROBES {
        for w in stds.windows(2) {
            worst_rise = worst_rise.max(mrr(w[1], np) - mrr(w[0], np));
        }
    }
    let gaps_ok = rep.gaps.len() == stds.len() * PROBES.len()
        && rep.gaps.iter().all(|g| g.recall_gap.is_finite() && g.mrr_gap.is_finite());
    let trend: Vec<String> = stds.iter().map(|&s| format!("{:.3}", mrr(s, 1))).collect();
    Verdict::new(
        worst_rise <= 0.02 && gaps_ok,
        format!(
            "mapped MRR@n_probe=1 over stds {:?}: [{}]; worst step rise {worst_rise:.3}; {} finite gap points",
            stds,
            trend.join(", "),
            rep.gaps.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut fx = Fixture::new();
    let mut results = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id} [{}] {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        results.push(v.pass);
    };
    run(1, "oracle equivalence", &mut criterion_oracle);
    run(2, "gradient correctness", &mut criterion_gradients);
    run(3, "structural invariants", &mut criterion_structure);
    run(4, "sizing within 5%", &mut criterion_sizing);
    run(5, "training trend", &mut || criterion_training(&mut fx));
    run(6, "routing trend", &mut || criterion_routing(&fx));
    run(7, "IVF trend", &mut || criterion_ivf(&fx));
    run(8, "timing asymmetry", &mut criterion_timing);
    run(9, "OOD sweep", &mut || criterion_ood(&fx));
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
