use gid_core::trainers::{pretrain_ind, run_pipeline_with, TestPredictions};
use gid_core::*;
use ndarray::{Array2, Axis};

fn dataset(classes: usize, per: usize, dim: usize, sep: f64, seed: u64) -> EmbeddingDataset {
    generate_synthetic(&SyntheticSpec {
        num_classes: classes,
        samples_per_class: per,
        dim,
        class_separation: sep,
        within_class_std: 1.0,
        domains: None,
        seed,
    })
    .unwrap()
}

fn split(classes: usize, ratio: f64, sep: f64, seed: u64) -> GidSplit {
    let ds = dataset(classes, 100, 16, sep, seed);
    build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, ratio, seed)).unwrap()
}

fn config(method: Method, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::new(method, seed)
    }
}

fn matrix(samples: &[SampleRecord]) -> Array2<f64> {
    let dim = samples[0].vector.len();
    Array2::from_shape_fn((samples.len(), dim), |(i, j)| samples[i].vector[j] as f64)
}

fn ind_accuracy(model: &JointModel, samples: &[SampleRecord]) -> f64 {
    let n = model.dims.n_ind;
    let logits = model.logits(&matrix(samples)).unwrap();
    let hits = logits
        .axis_iter(Axis(0))
        .zip(samples)
        .filter(|(row, s)| {
            let best = (0..n).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            Some(best) == s.label
        })
        .count();
    100.0 * hits as f64 / samples.len() as f64
}

/// Multinomial logistic regression by full-batch gradient descent on the raw
/// vectors; returns accuracy on `eval`.
fn logistic_regression_accuracy(train: &[SampleRecord], eval: &[SampleRecord], k: usize) -> f64 {
    let x = matrix(train);
    let d = x.ncols();
    let mut w = Array2::<f64>::zeros((d + 1, k));
    let xb = ndarray::concatenate![Axis(1), x, Array2::ones((x.nrows(), 1))];
    for _ in 0..500 {
        let mut p = xb.dot(&w);
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        for (i, s) in train.iter().enumerate() {
            p[[i, s.label.unwrap()]] -= 1.0;
        }
        w = w - xb.t().dot(&p) * (0.5 / train.len() as f64);
    }
    let xe = matrix(eval);
    let xe = ndarray::concatenate![Axis(1), xe, Array2::ones((xe.nrows(), 1))];
    let scores = xe.dot(&w);
    let hits = scores
        .axis_iter(Axis(0))
        .zip(eval)
        .filter(|(r, s)| {
            let best = (0..k).fold(0, |b, c| if r[c] > r[b] { c } else { b });
            Some(best) == s.label
        })
        .count();
    100.0 * hits as f64 / eval.len() as f64
}

#[test]
fn pretraining_separates_two_classes() {
    // 4 classes, half OOD: N = 2 labeled classes
    let sp = split(4, 0.5, 10.0, 1);
    let (model, curve) = pretrain_ind(&sp, &config(Method::E2e, 50, 1)).unwrap();
    assert!(curve.len() <= 50);
    assert_eq!(ind_accuracy(&model, &sp.ind_train), 100.0);
}

#[test]
fn zero_pretraining_epochs_keep_initialization() {
    let sp = split(4, 0.5, 4.0, 2);
    let cfg = config(Method::E2e, 0, 2);
    let (a, curve) = pretrain_ind(&sp, &cfg).unwrap();
    let (b, _) = pretrain_ind(&sp, &cfg).unwrap();
    assert!(curve.is_empty());
    assert_eq!(a.params, b.params);
    let fresh = JointModel::new(a.dims, 0).unwrap();
    assert_eq!(fresh.layout, a.layout);
}

#[test]
fn pretraining_matches_logistic_regression() {
    let ds = dataset(10, 120, 32, 6.0, 3);
    let sp = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 3)).unwrap();
    assert_eq!(sp.n_ind_classes, 6);
    let (model, _) = pretrain_ind(&sp, &config(Method::E2e, 100, 3)).unwrap();
    let ours = ind_accuracy(&model, &sp.ind_val);
    let oracle = logistic_regression_accuracy(&sp.ind_train, &sp.ind_val, 6);
    assert!(ours >= 95.0, "val accuracy {ours}");
    assert!((ours - oracle).abs() <= 3.0, "{ours} vs oracle {oracle}");
}

#[test]
fn empty_ind_train_is_a_data_error() {
    let mut sp = split(4, 0.5, 4.0, 4);
    sp.ind_train.clear();
    assert!(matches!(pretrain_ind(&sp, &config(Method::E2e, 5, 4)), Err(Error::Data(_))));
}

#[test]
fn single_ood_class_is_found_by_every_method() {
    // 5 classes at ratio 0.2: M = 1
    let sp = split(5, 0.2, 8.0, 5);
    assert_eq!(sp.n_ood_classes, 1);
    for method in [Method::KmeansPipeline, Method::DeepalignedPipeline, Method::E2e] {
        let out = run(&sp, &config(method, 30, 5)).unwrap();
        assert_eq!(out.report.metrics.ood_acc, 100.0, "{method}");
    }
}

#[test]
fn e2e_solves_a_well_separated_benchmark() {
    let ds = dataset(5, 120, 16, 8.0, 6);
    let sp = build_split(&ds, &SplitConfig::new(SplitMode::SingleDomain, 0.4, 6)).unwrap();
    assert_eq!((sp.n_ind_classes, sp.n_ood_classes), (3, 2));
    let out = run(&sp, &config(Method::E2e, 50, 6)).unwrap();
    assert!(out.report.metrics.all_acc >= 99.0, "{:?}", out.report.metrics.headline());
    assert!(out.report.loss_curve.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn deepaligned_mix_on_separated_data() {
    let sp = split(6, 0.5, 12.0, 7);
    let out = run(&sp, &config(Method::DeepalignedMix, 50, 7)).unwrap();
    assert_eq!(out.report.metrics.scope, MappingScope::All);
    assert!(out.report.metrics.all_acc >= 95.0, "{:?}", out.report.metrics.headline());
}

#[test]
fn deepaligned_mix_without_training_is_at_chance() {
    let sp = split(6, 0.5, 12.0, 8);
    let out = run(&sp, &config(Method::DeepalignedMix, 0, 8)).unwrap();
    let chance = 100.0 / 6.0;
    assert!((out.report.metrics.all_acc - chance).abs() <= 5.0, "{}", out.report.metrics.all_acc);
}

#[test]
fn test_partition_is_read_once_after_training() {
    for method in Method::ALL {
        let sp = split(6, 0.5, 6.0, 9);
        assert_eq!(sp.test_reads(), 0);
        let out = run(&sp, &config(method, 5, 9)).unwrap();
        assert_eq!(sp.test_reads(), 1, "{method}");
        assert_eq!(out.predictions.ids.len(), sp.test_len());
    }
}

#[test]
fn runs_are_deterministic() {
    for method in Method::ALL {
        let sp = split(6, 0.5, 5.0, 10);
        let a = run(&sp, &config(method, 8, 10)).unwrap();
        let b = run(&sp.clone(), &config(method, 8, 10)).unwrap();
        assert_eq!(a.model.params, b.model.params, "{method}");
        assert_eq!(a.report.metrics, b.report.metrics);
        assert_eq!(a.report.loss_curve, b.report.loss_curve);
    }
}

#[test]
fn stage_two_absorbs_pseudo_label_permutations() {
    let sp = split(8, 0.5, 3.0, 11);
    let m = sp.n_ood_classes;
    for method in [Method::KmeansPipeline, Method::DeepalignedPipeline] {
        let cfg = config(method, 15, 11);
        let base = run_pipeline_with(&sp, &cfg, None).unwrap();
        for perm in [vec![1, 0, 2, 3], vec![3, 2, 1, 0], vec![2, 3, 0, 1]] {
            assert_eq!(perm.len(), m);
            let other = run_pipeline_with(&sp, &cfg, Some(&perm)).unwrap();
            for ((name, a), (_, b)) in base.report.metrics.headline().iter().zip(other.report.metrics.headline()) {
                assert!((a - b).abs() < 1e-9, "{method} {name}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn bad_relabel_rejected() {
    let sp = split(8, 0.5, 3.0, 12);
    let cfg = config(Method::KmeansPipeline, 2, 12);
    assert!(run_pipeline_with(&sp, &cfg, Some(&[0, 0, 1, 2])).is_err());
    assert!(run_pipeline_with(&sp, &cfg, Some(&[0, 1])).is_err());
}

#[test]
fn predictions_line_up_with_test_samples() {
    let sp = split(6, 0.5, 6.0, 13);
    let out = run(&sp, &config(Method::KmeansPipeline, 5, 13)).unwrap();
    let TestPredictions { ids, gold, predicted } = &out.predictions;
    assert_eq!(ids.len(), gold.len());
    assert_eq!(gold.len(), predicted.len());
    let again = evaluate_gid(predicted, gold, sp.n_ind_classes, sp.n_ood_classes).unwrap();
    assert_eq!(again, out.report.metrics);
}

#[test]
fn invalid_configs_rejected() {
    let sp = split(6, 0.5, 6.0, 14);
    let mut cfg = config(Method::E2e, 2, 14);
    cfg.batch_size = 1;
    assert!(matches!(run(&sp, &cfg), Err(Error::Config(_))));
    let mut cfg = config(Method::E2e, 2, 14);
    cfg.dropout_p = 1.0;
    assert!(run(&sp, &cfg).is_err());
}
