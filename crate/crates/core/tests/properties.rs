use amips_core::evalkit::{match_rate, mrr, recall_at_k, relative_transport_error};
use amips_core::ivf::{build_ivf, search_ivf};
use amips_core::nets::{forward, init_params, Family, NetSpec};
use amips_core::oracle::{build_global_targets, support_and_argmax, top_k};
use amips_core::partition::kmeans_fit;
use amips_core::router::{routing_accuracy, RoutePlan, Scorer};
use amips_core::train::{lr_at, TrainConfig};
use amips_core::vecstore::{load_store, save_store, EmbeddingStore, StoreKind};
use ndarray::{Array2, Axis};
use proptest::prelude::*;

/// Small integer grid so ties occur.
fn store(rows: std::ops::RangeInclusive<usize>, dim: usize, kind: StoreKind) -> impl Strategy<Value = EmbeddingStore> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-3i8..=3, n * dim)
            .prop_map(move |v| EmbeddingStore::new(n, dim, v.into_iter().map(|x| x as f32 * 0.5).collect(), kind).unwrap())
    })
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, dim)
}

fn matrix(rows: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * dim).prop_map(move |v| Array2::from_shape_vec((rows, dim), v).unwrap())
}

fn naive_scores(q: &[f64], keys: &EmbeddingStore) -> Vec<f64> {
    (0..keys.rows())
        .map(|i| q.iter().zip(keys.row(i)).map(|(a, &b)| a * b as f64).sum())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn argmax_matches_naive_scan(keys in store(1..=60, 5, StoreKind::Key), q in vector(5)) {
        let s = naive_scores(&q, &keys);
        let best = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
        let (v, i) = support_and_argmax(&q, &keys, None).unwrap();
        prop_assert_eq!(i, best);
        prop_assert_eq!(v, s[best]);
    }

    #[test]
    fn top_k_is_sorted_prefix(keys in store(1..=60, 4, StoreKind::Key), q in vector(4), k in 1usize..80) {
        let k = k.min(keys.rows());
        let hits = top_k(&q, &keys, k).unwrap();
        prop_assert_eq!(hits.len(), k);
        prop_assert!(top_k(&q, &keys, keys.rows() + 1).is_err());
        for w in hits.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        let (_, arg) = support_and_argmax(&q, &keys, None).unwrap();
        prop_assert_eq!(hits[0].0, arg);
    }

    #[test]
    fn recall_at_one_is_match_rate(keys in store(2..=40, 3, StoreKind::Key), preds in matrix(6, 3), t in prop::collection::vec(0usize..1000, 6)) {
        let targets: Vec<usize> = t.iter().map(|i| i % keys.rows()).collect();
        let m = match_rate(preds.view(), &keys, &targets).unwrap();
        prop_assert_eq!(recall_at_k(preds.view(), &keys, &targets, 1).unwrap(), m);
        prop_assert!(mrr(preds.view(), &keys, &targets).unwrap() >= m);
        let r5 = recall_at_k(preds.view(), &keys, &targets, 5).unwrap();
        prop_assert!(r5 >= m);
        prop_assert_eq!(recall_at_k(preds.view(), &keys, &targets, keys.rows()).unwrap(), 1.0);
    }

    #[test]
    fn transport_error_is_invariant(p in matrix(5, 3), x in matrix(5, 3), y in matrix(5, 3), angle in 0.0f64..6.3, shift in 0usize..5) {
        let base = relative_transport_error(p.view(), x.view(), y.view()).unwrap().e_rel;
        let order: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let perm = |a: &Array2<f64>| a.select(Axis(0), &order);
        let permuted = relative_transport_error(perm(&p).view(), perm(&x).view(), perm(&y).view()).unwrap().e_rel;
        prop_assert!((permuted - base).abs() < 1e-12);
        let (c, s) = (angle.cos(), angle.sin());
        let rot = Array2::from_shape_vec((3, 3), vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let r = |a: &Array2<f64>| a.dot(&rot);
        let rotated = relative_transport_error(r(&p).view(), r(&x).view(), r(&y).view()).unwrap().e_rel;
        prop_assert!((rotated - base).abs() < 1e-8);
    }

    #[test]
    fn routing_accuracy_grows_with_k(keys in store(12..=40, 3, StoreKind::Key), queries in store(4..=10, 3, StoreKind::Query), seed in 0u64..4) {
        let c = 3;
        let part = kmeans_fit(&keys, c, 20, seed).unwrap();
        let targets = build_global_targets(&queries, &keys).unwrap();
        let mut prev = 0.0;
        for k in 1..=c {
            let plan = RoutePlan { scorer: Scorer::Centroid(&part), k_clusters: k };
            let (acc, _) = routing_accuracy(&plan, &queries, &targets, &part).unwrap();
            prop_assert!(acc >= prev);
            prev = acc;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn full_probe_ivf_is_exact(keys in store(8..=50, 4, StoreKind::Key), q in vector(4), cells in 1usize..6, k in 1usize..10) {
        let k = k.min(keys.rows());
        let index = build_ivf(&keys, cells, 0).unwrap();
        let hit = search_ivf(&index, &q, index.cell_count(), k).unwrap();
        prop_assert_eq!(hit.results, top_k(&q, &keys, k).unwrap());
    }

    #[test]
    fn store_round_trips(s in store(1..=20, 7, StoreKind::Query)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.bin");
        save_store(&s, &path).unwrap();
        prop_assert_eq!(load_store(&path, StoreKind::Query).unwrap(), s);
    }

    #[test]
    fn wrapped_supportnet_is_homogeneous(seed in 0u64..1000, x in vector(4), alpha in 0.1f64..20.0) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let mut spec = NetSpec::new(Family::SupportNet, 3, 8, 4, 2);
        spec.homogenize = true;
        let p = init_params(&spec, seed);
        let f = forward(&spec, &p, &x).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let fs = forward(&spec, &p, &xs).unwrap();
        for (a, b) in fs.iter().zip(&f) {
            prop_assert!((a - alpha * b).abs() <= 1e-9 * (alpha * b).abs().max(1.0));
        }
    }

    #[test]
    fn learning_rate_stays_in_range(step in 0usize..6000, total in 1usize..5000, batch in 1usize..2048) {
        let cfg = TrainConfig { total_steps: total, batch_size: batch, ..Default::default() };
        let lr = lr_at(step, &cfg);
        prop_assert!(lr >= 0.0 && lr <= cfg.scaled_peak() * (1.0 + 1e-12));
    }
}
