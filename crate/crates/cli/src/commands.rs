use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use amips_core::evalkit::{evaluate_model, MetricReport};
use amips_core::ivf::{build_ivf, default_cells, gap_csv, k_for_fraction, nprobe_sweep, ood_sweep, sweep_csv};
use amips_core::nets::sizing::{solve_width, BudgetSpec, SizeTag};
use amips_core::nets::{
    forward_batch, init_params, input_gradient_batch, load_model, predict_keys_batch, save_model, score_batch,
    Family, Model, NetSpec,
};
use amips_core::oracle::{build_global_targets, build_targets, TargetSet};
use amips_core::partition::{balance_score, select_balanced, Partition};
use amips_core::router::{curve_csv, routing_curve, Scorer};
use amips_core::synth::{mixture, MixtureConfig};
use amips_core::train::{history_csv, train_model, Batch, LossWeights, TrainConfig, Validation};
use amips_core::vecstore::{
    augment_queries, dedup_rows, load_store, normalize_rows, save_store, AugmentConfig, EmbeddingStore, StoreKind,
    AMIP_MAGIC,
};
use amips_core::QueryStrategy;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::session::Session;

pub fn dispatch(cmd: Command, s: &mut Session) -> CliResult<Value> {
    match cmd {
        Command::Ingest(a) => ingest(a, s),
        Command::Augment(a) => augment(a, s),
        Command::Cluster(a) => cluster(a, s),
        Command::Targets(a) => targets(a, s),
        Command::Train(a) => train(a, s),
        Command::Eval(a) => eval(a, s),
        Command::RouteBench(a) => route_bench(a, s),
        Command::IvfBench(a) => ivf_bench(a, s),
        Command::OodBench(a) => ood_bench(a, s),
        Command::Timing(a) => timing(a, s),
        Command::Synth(a) => synth(a, s),
    }
}

fn keys_in(s: &mut Session, p: &Path) -> CliResult<EmbeddingStore> {
    Ok(load_store(s.input(p), StoreKind::Key)?)
}

fn queries_in(s: &mut Session, p: &Path) -> CliResult<EmbeddingStore> {
    Ok(load_store(s.input(p), StoreKind::Query)?)
}

fn partition_in(s: &mut Session, p: &Path, keys: &EmbeddingStore) -> CliResult<Partition> {
    let part = Partition::load(s.input(p))?;
    if part.assignment().len() != keys.rows() || part.dim() != keys.dim() {
        return Err(CliError::usage(format!(
            "partition {} covers {} keys of dimension {}, key set has {} of dimension {}",
            p.display(),
            part.assignment().len(),
            part.dim(),
            keys.rows(),
            keys.dim()
        )));
    }
    Ok(part)
}

fn model_in(s: &mut Session, p: &Path) -> CliResult<Model> {
    Ok(load_model(s.input(p))?)
}

fn write_text(s: &mut Session, path: &Path, text: &str) -> CliResult<()> {
    let staged = s.output(path)?;
    fs::write(&staged, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn label(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Rows of floats separated by whitespace or commas; `#` starts a comment.
fn parse_text_rows(text: &str, kind: StoreKind) -> CliResult<EmbeddingStore> {
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f32> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::data(format!("line {}: {e}", no + 1)))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(CliError::data(format!("line {}: {} values, expected {d}", no + 1, row.len())))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let dim = dim.ok_or_else(|| CliError::data("no rows in input"))?;
    Ok(EmbeddingStore::new(rows, dim, data, kind)?)
}

fn ingest(a: IngestArgs, s: &mut Session) -> CliResult<Value> {
    let kind = match a.kind {
        KindArg::Key => StoreKind::Key,
        KindArg::Query => StoreKind::Query,
    };
    let path = s.input(&a.input);
    let bytes = fs::read(&path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut store = if bytes.starts_with(AMIP_MAGIC) {
        load_store(&path, kind)?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| CliError::data("input is neither AMIP nor UTF-8 text"))?;
        parse_text_rows(&text, kind)?
    };
    let rows_in = store.rows();
    if a.dedup {
        store = dedup_rows(&store);
    }
    if a.normalize {
        store = normalize_rows(&store)?;
    }
    save_store(&store, s.output(&a.out)?)?;
    Ok(json!({ "rows_in": rows_in, "rows_out": store.rows(), "dim": store.dim() }))
}

fn augment(a: AugmentArgs, s: &mut Session) -> CliResult<Value> {
    let q = queries_in(s, &a.queries)?;
    let cfg = AugmentConfig {
        noise_std: a.noise,
        factor: a.factor,
        seed: a.seed,
    };
    let out = augment_queries(&q, &cfg)?;
    save_store(&out, s.output(&a.out)?)?;
    Ok(json!({ "rows_in": q.rows(), "rows_out": out.rows() }))
}

fn cluster(a: ClusterArgs, s: &mut Session) -> CliResult<Value> {
    let keys = keys_in(s, &a.keys)?;
    let part = select_balanced(&keys, a.clusters, a.restarts, a.max_iters, a.seed)?;
    part.save(s.output(&a.out)?)?;
    Ok(json!({ "sizes": part.sizes(), "balance": balance_score(&part), "sse": part.sse(&keys) }))
}

fn compute_targets(queries: &EmbeddingStore, keys: &EmbeddingStore, part: Option<&Partition>) -> CliResult<TargetSet> {
    Ok(match part {
        Some(p) => build_targets(queries, keys, p)?,
        None => build_global_targets(queries, keys)?,
    })
}

fn targets(a: TargetsArgs, s: &mut Session) -> CliResult<Value> {
    let queries = queries_in(s, &a.queries)?;
    let keys = keys_in(s, &a.keys)?;
    let part = a.partition.as_deref().map(|p| partition_in(s, p, &keys)).transpose()?;
    let t = compute_targets(&queries, &keys, part.as_ref())?;
    t.save(s.output(&a.out)?)?;
    Ok(json!({ "queries": t.query_count(), "clusters": t.cluster_count() }))
}

fn net_spec(arch: &ArchArgs, keys: &EmbeddingStore, clusters: usize) -> CliResult<NetSpec> {
    let reinject = arch.reinject.count(arch.depth);
    let width = match (arch.size, arch.width) {
        (Some(_), Some(_)) => return Err(CliError::usage("--size and --width are mutually exclusive")),
        (None, Some(w)) => w,
        (tag, None) => solve_width(&BudgetSpec {
            rho: tag.unwrap_or(SizeTag::M).fraction(),
            n: keys.rows(),
            d: keys.dim(),
            depth: arch.depth,
            reinject,
        })?,
    };
    let mut spec = NetSpec::new(arch.family, arch.depth, width, keys.dim(), clusters);
    spec.reinject = reinject;
    spec.residual = arch.residual;
    spec.homogenize = arch.homogenize.unwrap_or(arch.family == Family::SupportNet);
    spec.validate()?;
    Ok(spec)
}

fn train(a: TrainArgs, s: &mut Session) -> CliResult<Value> {
    let keys = keys_in(s, &a.keys)?;
    let queries = queries_in(s, &a.queries)?;
    let part = a.partition.as_deref().map(|p| partition_in(s, p, &keys)).transpose()?;
    let tr_targets = match &a.targets {
        Some(p) => TargetSet::load(s.input(p), &queries, &keys)?,
        None => compute_targets(&queries, &keys, part.as_ref())?,
    };
    let clusters = tr_targets.cluster_count();
    match &part {
        Some(p) if p.cluster_count() != clusters => {
            return Err(CliError::usage(format!(
                "targets have {clusters} clusters, partition has {}",
                p.cluster_count()
            )))
        }
        None if clusters > 1 => return Err(CliError::usage("per-cluster targets need --partition")),
        _ => {}
    }
    let spec = net_spec(&a.arch, &keys, clusters)?;
    let cfg = TrainConfig {
        peak_lr: a.lr,
        warmup_fraction: a.warmup,
        total_steps: a.steps,
        batch_size: a.batch_size,
        reference_batch: a.reference_batch,
        ema_decay_ref: a.ema,
        seed: a.seed,
        log_every: a.log_every,
    };
    let w = LossWeights {
        score: a.w_score,
        grad: a.w_grad,
        key: a.w_key,
        consist: a.w_consist,
        nonneg: a.w_nonneg,
    };
    let val_queries = a.val_queries.as_deref().map(|p| queries_in(s, p)).transpose()?;
    let val_targets = val_queries
        .as_ref()
        .map(|q| compute_targets(q, &keys, part.as_ref()))
        .transpose()?;
    let val = val_queries.as_ref().zip(val_targets.as_ref()).map(|(q, t)| Validation {
        queries: q,
        keys: &keys,
        targets: t,
        partition: part.as_ref(),
    });
    let model_out = s.output(&a.out)?;
    let history_out = a.history.as_deref().map(|p| s.output(p)).transpose()?;
    let data = Batch::from_targets(&queries, &keys, &tr_targets)?;
    let init = init_params(&spec, a.seed);
    let outcome = train_model(&spec, &init, &data, &cfg, &w, val.as_ref())?;
    let model = Model::new(spec.clone(), outcome.ema)?;
    save_model(&model, &model_out)?;
    if let Some(p) = history_out {
        fs::write(&p, history_csv(&outcome.history)).map_err(|e| CliError::data(format!("cannot write history: {e}")))?;
    }
    let last = outcome.history.last();
    Ok(json!({
        "family": spec.family.name(),
        "width": spec.width,
        "parameters": spec.param_count(),
        "final_loss": last.map(|r| r.loss.total),
        "val_erel": last.and_then(|r| r.val_erel),
        "val_match_rate": last.and_then(|r| r.val_match_rate),
    }))
}

fn eval(a: EvalArgs, s: &mut Session) -> CliResult<Value> {
    let model = model_in(s, &a.model)?;
    let queries = queries_in(s, &a.queries)?;
    let keys = keys_in(s, &a.keys)?;
    let part = a.partition.as_deref().map(|p| partition_in(s, p, &keys)).transpose()?;
    if model.spec.clusters > 1 && part.is_none() {
        return Err(CliError::usage("models with several clusters need --partition"));
    }
    let t = match &a.targets {
        Some(p) => TargetSet::load(s.input(p), &queries, &keys)?,
        None => compute_targets(&queries, &keys, part.as_ref())?,
    };
    if t.cluster_count() != model.spec.clusters {
        return Err(CliError::usage(format!(
            "model has {} clusters, targets have {}",
            model.spec.clusters,
            t.cluster_count()
        )));
    }
    let r = evaluate_model(&model, &queries, &keys, &t, part.as_ref())?;
    let text = format!("{}\n{}\n", MetricReport::csv_header(), r.csv_row());
    print!("{text}");
    write_text(s, &a.out, &text)?;
    Ok(json!({ "e_rel": r.e_rel, "match_rate": r.match_rate, "mrr": r.mrr, "flagged": r.flagged }))
}

fn route_bench(a: RouteBenchArgs, s: &mut Session) -> CliResult<Value> {
    let keys = keys_in(s, &a.keys)?;
    let queries = queries_in(s, &a.queries)?;
    let part = partition_in(s, &a.partition, &keys)?;
    let models: Vec<(Model, String)> = a
        .models
        .iter()
        .map(|p| Ok((model_in(s, p)?, label(p))))
        .collect::<CliResult<_>>()?;
    for (m, l) in &models {
        if m.spec.clusters != part.cluster_count() {
            return Err(CliError::usage(format!(
                "model {l} scores {} clusters, partition has {}",
                m.spec.clusters, part.cluster_count()
            )));
        }
    }
    let k_max = a.k_max.unwrap_or(part.cluster_count());
    let targets = build_global_targets(&queries, &keys)?;
    let mut scorers: Vec<(Scorer, &str)> = models.iter().map(|(m, l)| (Scorer::Learned(m), l.as_str())).collect();
    scorers.push((Scorer::Centroid(&part), ""));
    let rows = routing_curve(&scorers, &queries, &targets, &part, k_max)?;
    write_text(s, &a.out, &curve_csv(&rows))?;
    Ok(json!({ "rows": rows.len(), "k_max": k_max }))
}

struct IvfSetup {
    keys: EmbeddingStore,
    queries: EmbeddingStore,
    models: Vec<(Model, String)>,
    cells: usize,
    ks: Vec<usize>,
}

fn ivf_setup(a: &IvfArgs, s: &mut Session) -> CliResult<IvfSetup> {
    let keys = keys_in(s, &a.keys)?;
    let queries = queries_in(s, &a.queries)?;
    let models: Vec<(Model, String)> = a
        .models
        .iter()
        .map(|p| Ok((model_in(s, p)?, label(p))))
        .collect::<CliResult<_>>()?;
    let cells = a.cells.unwrap_or_else(|| default_cells(keys.rows()));
    if let Some(&np) = a.n_probes.iter().find(|&&np| np == 0 || np > cells) {
        return Err(CliError::usage(format!("n_probe {np} outside 1..={cells}")));
    }
    let mut ks = a.ks.clone();
    for &f in &a.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::usage(format!("fraction {f} outside (0, 1]")));
        }
        ks.push(k_for_fraction(keys.rows(), f));
    }
    if ks.is_empty() {
        return Err(CliError::usage("no result sizes given (--ks or --fractions)"));
    }
    Ok(IvfSetup {
        keys,
        queries,
        models,
        cells,
        ks,
    })
}

fn strategies(models: &[(Model, String)]) -> Vec<(QueryStrategy<'_>, &str)> {
    let mut out = vec![(QueryStrategy::Natural, "")];
    out.extend(models.iter().map(|(m, l)| (QueryStrategy::Mapped(m), l.as_str())));
    out
}

fn ivf_bench(a: IvfBenchArgs, s: &mut Session) -> CliResult<Value> {
    let st = ivf_setup(&a.ivf, s)?;
    let index = build_ivf(&st.keys, st.cells, a.ivf.seed)?;
    let targets = build_global_targets(&st.queries, &st.keys)?;
    let strat = strategies(&st.models);
    let mut points = Vec::new();
    for &k in &st.ks {
        points.extend(nprobe_sweep(&index, &strat, &st.queries, &targets, &a.ivf.n_probes, k)?);
    }
    write_text(s, &a.out, &sweep_csv(&points))?;
    Ok(json!({ "cells": st.cells, "ks": st.ks, "rows": points.len() }))
}

fn default_gaps_path(out: &Path) -> PathBuf {
    out.with_file_name(format!("{}_gaps.csv", label(out)))
}

fn ood_bench(a: OodBenchArgs, s: &mut Session) -> CliResult<Value> {
    let st = ivf_setup(&a.ivf, s)?;
    let index = build_ivf(&st.keys, st.cells, a.ivf.seed)?;
    let strat = strategies(&st.models);
    let mut points = Vec::new();
    let mut gaps = Vec::new();
    for &k in &st.ks {
        let r = ood_sweep(&index, &strat, &st.queries, &a.stds, &a.ivf.n_probes, k, a.ivf.seed)?;
        points.extend(r.points);
        gaps.extend(r.gaps);
    }
    write_text(s, &a.out, &sweep_csv(&points))?;
    let gaps_path = a.gaps_out.clone().unwrap_or_else(|| default_gaps_path(&a.out));
    write_text(s, &gaps_path, &gap_csv(&gaps))?;
    Ok(json!({ "cells": st.cells, "rows": points.len(), "gap_rows": gaps.len() }))
}

pub const TIMING_HEADER: &str = "family,op,batch,runs,median_ms,mean_ms,ratio_to_score";

fn time_runs(warmup: usize, runs: usize, mut f: impl FnMut() -> CliResult<()>) -> CliResult<Vec<Duration>> {
    for _ in 0..warmup {
        f()?;
    }
    (0..runs)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed())
        })
        .collect()
}

fn median_ms(t: &[Duration]) -> f64 {
    let mut v: Vec<f64> = t.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean_ms(t: &[Duration]) -> f64 {
    t.iter().map(|d| d.as_secs_f64() * 1e3).sum::<f64>() / t.len() as f64
}

fn timing(a: TimingArgs, s: &mut Session) -> CliResult<Value> {
    if a.runs == 0 || a.batch == 0 {
        return Err(CliError::usage("--runs and --batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = Array2::from_shape_simple_fn((a.batch, a.dim), || rng.sample::<f64, _>(StandardNormal));
    let mut text = format!("{TIMING_HEADER}\n");
    let mut summary = serde_json::Map::new();
    for family in [Family::KeyNet, Family::SupportNet] {
        let mut spec = NetSpec::new(family, a.depth, a.width, a.dim, a.clusters);
        spec.reinject = a.reinject.count(a.depth);
        spec.residual = a.residual;
        spec.validate()?;
        let p = init_params(&spec, a.seed);
        let score = time_runs(a.warmup, a.runs, || {
            std::hint::black_box(match family {
                Family::KeyNet => score_batch(&spec, &p, x.view())?,
                Family::SupportNet => forward_batch(&spec, &p, x.view())?,
            });
            Ok(())
        })?;
        let keys = time_runs(a.warmup, a.runs, || {
            std::hint::black_box(match family {
                Family::KeyNet => predict_keys_batch(&spec, &p, x.view())?,
                Family::SupportNet => input_gradient_batch(&spec, &p, x.view())?,
            });
            Ok(())
        })?;
        let base = median_ms(&score);
        for (op, t) in [("score", &score), ("keys", &keys)] {
            let ratio = median_ms(t) / base;
            text.push_str(&format!(
                "{},{op},{},{},{},{},{ratio}\n",
                family.name(),
                a.batch,
                a.runs,
                median_ms(t),
                mean_ms(t)
            ));
            summary.insert(format!("{}_{op}_ratio", family.name()), json!(ratio));
        }
    }
    print!("{text}");
    write_text(s, &a.out, &text)?;
    Ok(Value::Object(summary))
}

fn synth(a: SynthArgs, s: &mut Session) -> CliResult<Value> {
    let cfg = MixtureConfig {
        keys: a.keys,
        dim: a.dim,
        components: a.components,
        key_spread: a.key_spread,
        query_shift: a.query_shift,
        query_spread: a.query_spread,
        train_queries: a.train_queries,
        val_queries: a.val_queries,
        seed: a.seed,
    };
    let m = mixture(&cfg)?;
    for (name, store) in [("keys.amip", &m.keys), ("train.amip", &m.train), ("val.amip", &m.val)] {
        save_store(store, s.output(&a.out_dir.join(name))?)?;
    }
    Ok(json!({ "keys": m.keys.rows(), "train": m.train.rows(), "val": m.val.rows(), "dim": m.keys.dim() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_rows_parse_with_mixed_separators() {
        let s = parse_text_rows("# header\n1, 2 3\n4\t5,6 # tail\n\n", StoreKind::Key).unwrap();
        assert_eq!((s.rows(), s.dim()), (2, 3));
        assert_eq!(s.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn ragged_or_bad_text_is_a_data_error() {
        assert!(matches!(parse_text_rows("1 2\n3\n", StoreKind::Key), Err(CliError::Data(_))));
        assert!(matches!(parse_text_rows("1 x\n", StoreKind::Key), Err(CliError::Data(_))));
        assert!(matches!(parse_text_rows("# only\n", StoreKind::Key), Err(CliError::Data(_))));
    }

    #[test]
    fn medians_of_even_and_odd_runs() {
        let ms = |v: &[u64]| v.iter().map(|&m| Duration::from_millis(m)).collect::<Vec<_>>();
        assert_eq!(median_ms(&ms(&[3, 1, 2])), 2.0);
        assert_eq!(median_ms(&ms(&[4, 1, 2, 3])), 2.5);
        assert_eq!(mean_ms(&ms(&[1, 2, 3])), 2.0);
    }

    #[test]
    fn gaps_default_next_to_output() {
        assert_eq!(default_gaps_path(Path::new("out/ood.csv")), PathBuf::from("out/ood_gaps.csv"));
    }
}
