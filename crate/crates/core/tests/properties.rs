use mtoc_core::harness::dataset::{load_csv, write_csv};
use mtoc_core::harness::experiment::{ResultTable, RunRecord};
use mtoc_core::harness::synth::{synth_tasks, SynthSpec};
use mtoc_core::kernels::{median_heuristic_width, rbf_gram};
use mtoc_core::linear::{solve_a_sylvester, sylvester_residual, train_linear, LinearHyperparams};
use mtoc_core::model::{ModelConfig, TrainedModel, Variant};
use mtoc_core::ocksr::{build_responses, ResponseMode};
use mtoc_core::persist::{decode_model, encode_model};
use mtoc_core::sparse::prox_sparse_group;
use mtoc_core::{Error, Mat};
use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gauss(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

fn contiguous_ids(n: usize, tasks: usize) -> Vec<usize> {
    (0..n).map(|i| i * tasks / n).collect()
}

const VARIANTS: [Variant; 5] = [
    Variant::Ocksr,
    Variant::COcksr,
    Variant::Linear,
    Variant::Nonlinear,
    Variant::Sparse,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gram_is_a_psd_similarity(seed in 0u64..10_000, n in 2usize..12, d in 1usize..5) {
        let x = gauss(n, d, seed);
        let k = rbf_gram(&x, median_heuristic_width(&x).unwrap()).unwrap();
        prop_assert!((&k - k.transpose()).amax() == 0.0);
        for i in 0..n {
            prop_assert_eq!(k[(i, i)], 1.0);
        }
        prop_assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
        let min = SymmetricEigen::new(k).eigenvalues.min();
        prop_assert!(min > -1e-10, "min eigenvalue {}", min);
    }

    #[test]
    fn median_width_follows_feature_scale(seed in 0u64..10_000, c in 0.1f64..10.0) {
        let x = gauss(7, 3, seed);
        let s = median_heuristic_width(&x).unwrap();
        let sc = median_heuristic_width(&(&x * c)).unwrap();
        prop_assert!((sc - c * s).abs() <= 1e-12 * sc);
        let mut rev = x.clone();
        for i in 0..7 {
            rev.set_row(i, &x.row(6 - i));
        }
        prop_assert_eq!(median_heuristic_width(&rev).unwrap(), s);
    }

    #[test]
    fn sylvester_solution_has_small_residual(seed in 0u64..10_000, n in 3usize..14, t in 1usize..4, g in 1e-3f64..2.0) {
        let t = t.min(n);
        let x = gauss(n, 2, seed);
        let k = rbf_gram(&x, 1.0).unwrap();
        let b = gauss(t, t, seed + 1);
        let r = build_responses(&contiguous_ids(n, t), t, ResponseMode::JointOneHot).unwrap();
        let a = solve_a_sylvester(&k, &b, &r, g).unwrap();
        prop_assert!(sylvester_residual(&k, &a, &b, &r, g) < 1e-8);
    }

    #[test]
    fn linear_trace_never_rises(seed in 0u64..10_000) {
        let x = gauss(9, 3, seed);
        let k = rbf_gram(&x, median_heuristic_width(&x).unwrap()).unwrap();
        let r = build_responses(&contiguous_ids(9, 3), 3, ResponseMode::JointOneHot).unwrap();
        let fit = train_linear(&k, &r, &LinearHyperparams { max_outer_iters: 60, ..Default::default() }).unwrap();
        let q = &fit.trace.objective;
        prop_assert!(q.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0)));
    }

    #[test]
    fn prox_zeroes_exactly_the_weak_groups(seed in 0u64..10_000, t1 in 0.0f64..0.5, t2 in 0.0f64..2.0) {
        let v = gauss(6, 4, seed);
        let p = prox_sparse_group(&v, t1, t2);
        for c in 0..4 {
            let soft = v.column(c).map(|x| x.signum() * (x.abs() - t1).max(0.0));
            let zero = p.column(c).iter().all(|&x| x == 0.0);
            prop_assert_eq!(zero, soft.norm() <= t2);
        }
    }

    #[test]
    fn csv_round_trip(seed in 0u64..10_000, tasks in 1usize..4, bg in 0.0f64..1.0) {
        let bg = if tasks == 1 { 1.0 } else { bg };
        let spec = SynthSpec { tasks, n_per_task: 4, dim: 3, test_targets: 3, test_nontargets: 4, background_fraction: bg, seed, ..Default::default() };
        let b = synth_tasks(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_csv(&b, &p).unwrap();
        let back = load_csv(&p).unwrap();
        prop_assert_eq!(back.features, b.features);
        prop_assert_eq!(back.labels, b.labels);
    }

    #[test]
    fn result_means_re_aggregate(aucs in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 1..5), 1..12)) {
        let runs: Vec<RunRecord> = aucs
            .into_iter()
            .enumerate()
            .map(|(i, auc)| RunRecord {
                variant: VARIANTS[i % 5],
                gamma: if i % 2 == 0 { 1.0 } else { 0.1 },
                repetition: i,
                seed: i as u64,
                auc,
                sse: Some(i as f64),
                selected: None,
                train_rows: 1,
                test_rows: 1,
                fingerprint: None,
                model_file: None,
                trace: None,
                error: None,
            })
            .collect();
        let table = ResultTable::from_runs(runs);
        prop_assert!(table.check_means(1e-12).is_ok());
        let mut bad = table.clone();
        bad.means[0].mean_auc += 1e-6;
        prop_assert!(bad.check_means(1e-12).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_bytes_round_trip_and_truncation_is_caught(seed in 0u64..1000, v in 0usize..5, cut in 0.0f64..1.0) {
        let spec = SynthSpec { tasks: 2, n_per_task: 4, dim: 3, test_targets: 2, test_nontargets: 2, seed, ..Default::default() };
        let b = synth_tasks(&spec).unwrap();
        let mut cfg = ModelConfig::new(VARIANTS[v]);
        cfg.linear.max_outer_iters = 10;
        cfg.nonlinear.max_outer_iters = 10;
        cfg.sparse.max_outer_iters = 3;
        let m = TrainedModel::fit(&cfg, &b.train_features(), &b.train_task_ids(), 2).unwrap();
        let bytes = encode_model(&m);
        prop_assert_eq!(&decode_model(&bytes).unwrap(), &m);
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(matches!(decode_model(&bytes[..n]), Err(Error::Corruption(_))));
    }
}
