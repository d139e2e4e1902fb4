use fednorm::analysis::{
    feature_matrix, local_overfit_probe, norm_trace, one_class_loss, probe_indices, spectral_gap, spectrum,
    svd_singular_values, LocalSchedule,
};
use fednorm::config::{ExperimentConfig, ModelConfig};
use fednorm::experiment::setup;
use fednorm::model::{Model, NetworkSpec, NormMode};
use fednorm::tensor::softmax_cross_entropy;
use fednorm::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn to_na(m: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.shape()[0], m.shape()[1], m.data())
}

/// Square roots of the eigenvalues of the smaller Gram matrix, descending.
fn gram_oracle(m: &Tensor) -> Vec<f64> {
    let a = to_na(m);
    let gram = if a.nrows() <= a.ncols() { &a * a.transpose() } else { a.transpose() * &a };
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn wide_feature_matrix_matches_gram_oracle() {
    let m = random_matrix(20, 384, 4);
    let sv = svd_singular_values(&m).unwrap();
    assert_eq!(sv.len(), 20);
    let frob: f64 = m.data().iter().map(|v| v * v).sum();
    let total: f64 = sv.iter().map(|s| s * s).sum();
    assert!((total - frob).abs() / frob < 1e-8);
    let oracle = gram_oracle(&m);
    for (a, b) in sv.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8 * sv[0], "{a} vs {b}");
    }
}

#[test]
fn tall_matrix_agrees_with_nalgebra_svd() {
    let m = random_matrix(50, 7, 9);
    let sv = svd_singular_values(&m).unwrap();
    let mut reference: Vec<f64> = to_na(&m).singular_values().iter().copied().collect();
    reference.sort_by(|x, y| y.total_cmp(x));
    for (a, b) in sv.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-10 * sv[0]);
    }
}

#[test]
fn rank_one_product_has_infinite_gap() {
    let u = [1.0, 2.0, -2.0];
    let v = [3.0, 0.0, 4.0, 0.0];
    let data: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
    let r = spectrum(&Tensor::new(vec![3, 4], data).unwrap()).unwrap();
    assert!((r.singular_values[0] - 15.0).abs() < 1e-12);
    assert!(r.spectral_gap.is_infinite());
    assert_eq!(r.effective_rank, 1);
}

fn rotation(n: usize, seed: u64) -> DMatrix<f64> {
    let a = to_na(&random_matrix(n, n, seed));
    a.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_of_squares_is_frobenius(rows in 2usize..9, cols in 2usize..9, seed in any::<u64>()) {
        let m = random_matrix(rows, cols, seed);
        let sv = svd_singular_values(&m).unwrap();
        let frob: f64 = m.data().iter().map(|v| v * v).sum();
        prop_assert!((sv.iter().map(|s| s * s).sum::<f64>() - frob).abs() <= 1e-8 * frob);
        prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(sv.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn invariant_under_column_permutation(rows in 2usize..9, cols in 2usize..9, seed in any::<u64>()) {
        let m = random_matrix(rows, cols, seed);
        let mut perm: Vec<usize> = (0..cols).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % cols);
        let data: Vec<f64> = (0..rows).flat_map(|r| perm.iter().map(move |&c| (r, c))).map(|(r, c)| m.row(r)[c]).collect();
        let p = Tensor::new(vec![rows, cols], data).unwrap();
        let (a, b) = (svd_singular_values(&m).unwrap(), svd_singular_values(&p).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-7 * a[0].max(1.0));
        }
    }

    #[test]
    fn invariant_under_left_rotation(rows in 2usize..9, cols in 2usize..9, seed in any::<u64>()) {
        let m = random_matrix(rows, cols, seed);
        let q = rotation(rows, seed ^ 0x5eed);
        let qm = &q * to_na(&m);
        let data: Vec<f64> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| qm[(r, c)]).collect();
        let rotated = Tensor::new(vec![rows, cols], data).unwrap();
        let (a, b) = (svd_singular_values(&m).unwrap(), svd_singular_values(&rotated).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-7 * a[0].max(1.0));
        }
    }
}

fn desk(norm: NormMode) -> (ExperimentConfig, fednorm::experiment::Setup) {
    let mut c = ExperimentConfig::default();
    if let ModelConfig::Mlp { norm: n, .. } = &mut c.model {
        *n = norm;
    }
    let s = setup(&c).unwrap();
    (c, s)
}

#[test]
fn fresh_model_has_finite_gap() {
    let (_, s) = desk(NormMode::None);
    let probes = s.test.batch(&probe_indices(&s.test, 20, 0)).unwrap().0;
    let r = spectral_gap(&s.model, &probes).unwrap();
    assert!(r.spectral_gap.is_finite() && r.spectral_gap >= 1.0);
    let f = feature_matrix(&s.model, &probes).unwrap();
    assert_eq!(f.shape(), &[16, 20]);
}

#[test]
fn probe_set_spans_all_classes() {
    let (_, s) = desk(NormMode::None);
    let idx = probe_indices(&s.test, 20, 3);
    let mut seen = vec![0; 10];
    for i in idx {
        seen[s.test.labels()[i]] += 1;
    }
    assert_eq!(seen, vec![2; 10]);
}

#[test]
fn one_class_loss_equals_cross_entropy() {
    let (_, s) = desk(NormMode::None);
    let shard = &s.train_shards[0];
    let k = shard.present_classes()[0];
    let (x, labels) = s.train.batch(&shard.indices).unwrap();
    let (logits, _) = s.model.forward(&x).unwrap();
    let mut direct = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = Tensor::from_vec(logits.row(i).to_vec());
        direct += softmax_cross_entropy(&row, y).unwrap();
    }
    direct /= labels.len() as f64;
    assert!((one_class_loss(&s.model, &x, k).unwrap() - direct).abs() < 1e-10);
}

fn schedule(steps: usize) -> LocalSchedule {
    LocalSchedule {
        steps,
        lr: 0.01,
        batch_size: 32,
        seed: 1,
    }
}

#[test]
fn fn_last_feature_norms_stay_at_sqrt_d() {
    let (_, s) = desk(NormMode::FnLast);
    let probes = s.test.batch(&probe_indices(&s.test, 20, 0)).unwrap().0;
    let (trace, _) = norm_trace(&s.model, &s.train, &s.train_shards[0], &probes, &schedule(200), None).unwrap();
    assert_eq!(trace.records.len(), 201);
    for r in &trace.records {
        for n in &r.feature_norms {
            assert!((n - 4.0).abs() < 1e-9);
        }
    }
}

#[test]
fn step_zero_is_the_untrained_model() {
    let (_, s) = desk(NormMode::None);
    let probes = s.test.batch(&probe_indices(&s.test, 8, 0)).unwrap().0;
    let (trace, _) = norm_trace(&s.model, &s.train, &s.train_shards[0], &probes, &schedule(3), None).unwrap();
    let first = &trace.records[0];
    assert_eq!(first.step, 0);
    assert!(first.loss.is_none());
    let (_, feats) = s.model.forward(&probes).unwrap();
    for (n, row) in first.feature_norms.iter().zip(feats.rows()) {
        assert_eq!(*n, row.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    for (n, row) in first.class_norms.iter().zip(s.model.classifier().rows()) {
        assert_eq!(*n, row.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
}

#[test]
fn vanilla_one_class_training_grows_the_feature_norm() {
    let (_, s) = desk(NormMode::None);
    let probes = s.test.batch(&probe_indices(&s.test, 20, 0)).unwrap().0;
    let steps = 300;
    let (trace, _) = norm_trace(&s.model, &s.train, &s.train_shards[0], &probes, &schedule(steps), None).unwrap();
    let maxes: Vec<f64> = trace.records.iter().map(|r| r.max_feature_norm()).collect();
    let tail = &maxes[steps / 5..];
    assert!(tail.windows(2).all(|w| w[1] > w[0]), "max feature norm not strictly increasing");
}

#[test]
fn zero_step_probe_changes_nothing() {
    let (_, s) = desk(NormMode::None);
    let r = local_overfit_probe(&s.model, &s.train, &s.train_shards[0], &s.test, &schedule(0)).unwrap();
    assert_eq!(r.per_class_before, r.per_class_after);
    assert_eq!(r.local_acc_before, r.local_acc_after);
    assert_eq!(r.other_class_drop(), Some(0.0));
}

#[test]
fn local_training_favours_the_own_class() {
    let (_, s) = desk(NormMode::None);
    let r = local_overfit_probe(&s.model, &s.train, &s.train_shards[0], &s.test, &schedule(300)).unwrap();
    let own = r.own_classes[0];
    assert!(r.per_class_after[own].unwrap() >= r.per_class_before[own].unwrap());
    assert!(r.local_acc_after > 0.99);
    assert!(r.other_class_drop().unwrap() > 0.0);
}

#[test]
fn gap_of_a_fixed_model_ignores_probe_order() {
    let model = Model::build(NetworkSpec::mlp(6, &[8, 5], 3, NormMode::None), 2).unwrap();
    let x = random_matrix(10, 6, 1);
    let rev: Vec<usize> = (0..10).rev().collect();
    let y = x.gather_rows(&rev).unwrap();
    let (a, b) = (spectral_gap(&model, &x).unwrap(), spectral_gap(&model, &y).unwrap());
    assert!((a.spectral_gap - b.spectral_gap).abs() < 1e-9 * a.spectral_gap);
}
