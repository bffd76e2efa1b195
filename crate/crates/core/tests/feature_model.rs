//! Statistical checks of the firing models and the sample generator.

use hedgelab::feature_model::{joint_from_correlation, make_basis, sample_batch};
use hedgelab::rng::{stream_rng, STREAM_DATA};
use hedgelab::{FiringModel, FiringRule};

const SAMPLES: usize = 1_000_000;

/// Firing counts per feature and co-firing counts per pair.
fn counts(model: &FiringModel, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = model.len();
    let mut rng = stream_rng(seed, STREAM_DATA);
    let mut bits = vec![false; n];
    let mut single = vec![0.0; n];
    let mut pair = vec![vec![0.0; n]; n];
    for _ in 0..SAMPLES {
        model.sample_bits(&mut rng, &mut bits);
        for i in 0..n {
            if bits[i] {
                single[i] += 1.0;
                for j in 0..n {
                    if bits[j] {
                        pair[i][j] += 1.0;
                    }
                }
            }
        }
    }
    (single, pair)
}

fn models() -> Vec<FiringModel> {
    vec![
        FiringModel::independent(&[0.25, 0.25, 0.25, 0.2]).unwrap(),
        FiringModel::new(vec![
            FiringRule::Independent { p: 0.25 },
            FiringRule::Conditional { parent: 0, p_on: 0.2, p_off: 0.0 },
            FiringRule::Conditional { parent: 0, p_on: 0.1, p_off: 0.2 },
        ])
        .unwrap(),
        FiringModel::new(vec![
            FiringRule::Independent { p: 0.45 },
            FiringRule::Correlated { partner: 0, p: 0.25, rho: 0.375 },
            FiringRule::Correlated { partner: 0, p: 0.25, rho: -0.375 },
        ])
        .unwrap(),
    ]
}

#[test]
fn marginals_within_four_sigma() {
    for (m, model) in models().iter().enumerate() {
        let (single, _) = counts(model, 100 + m as u64);
        for (i, (&c, &p)) in single.iter().zip(model.marginals()).enumerate() {
            let sigma = (p * (1.0 - p) / SAMPLES as f64).sqrt();
            let rate = c / SAMPLES as f64;
            assert!((rate - p).abs() <= 4.0 * sigma, "model {m} feature {i}: {rate} vs {p}");
        }
    }
}

#[test]
fn correlation_rules_hit_target_rho() {
    let model = &models()[2];
    let (single, pair) = counts(model, 7);
    let n = SAMPLES as f64;
    for (j, target) in [(1, 0.375), (2, -0.375)] {
        let (p0, pj) = (single[0] / n, single[j] / n);
        let cov = pair[0][j] / n - p0 * pj;
        let rho = cov / (p0 * (1.0 - p0) * pj * (1.0 - pj)).sqrt();
        assert!((rho - target).abs() < 0.01, "feature {j}: rho {rho} vs {target}");
    }
}

#[test]
fn hierarchy_child_never_fires_alone() {
    let model = FiringModel::new(vec![
        FiringRule::Independent { p: 0.25 },
        FiringRule::Conditional { parent: 0, p_on: 0.2, p_off: 0.0 },
    ])
    .unwrap();
    let (single, pair) = counts(&model, 3);
    assert_eq!(pair[1][1] - pair[0][1], 0.0);
    assert!((single[1] / SAMPLES as f64 - 0.05).abs() < 0.001);
}

#[test]
fn joint_table_recovers_requested_correlation() {
    for rho in [-0.5, -0.125, 0.0, 0.25, 0.5] {
        let t = joint_from_correlation(0.45, 0.25, rho).unwrap();
        let (a, b) = t.marginals();
        assert!((a - 0.45).abs() < 1e-12 && (b - 0.25).abs() < 1e-12);
        assert!((t.correlation() - rho).abs() < 1e-12);
    }
    assert!(joint_from_correlation(0.1, 0.9, 0.9).is_err());
}

#[test]
fn samples_are_sums_of_firing_features() {
    let basis = make_basis(50, 4, 1, false).unwrap();
    let model = &models()[1];
    let model = FiringModel::new(model.rules().iter().copied().chain([FiringRule::Independent { p: 0.5 }]).collect())
        .unwrap();
    let batch = sample_batch(&basis, &model, 2_000, &mut stream_rng(1, STREAM_DATA)).unwrap();
    assert!(batch.max_reconstruction_error(&basis).unwrap() < 1e-12);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let basis = make_basis(20, 4, 2, false).unwrap();
    let model = &models()[0];
    let a = sample_batch(&basis, model, 500, &mut stream_rng(4, STREAM_DATA)).unwrap();
    let b = sample_batch(&basis, model, 500, &mut stream_rng(4, STREAM_DATA)).unwrap();
    let c = sample_batch(&basis, model, 500, &mut stream_rng(5, STREAM_DATA)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bases_are_orthonormal_and_seeded() {
    let a = make_basis(50, 4, 0, false).unwrap();
    let b = make_basis(50, 4, 0, false).unwrap();
    let c = make_basis(50, 4, 1, false).unwrap();
    assert_eq!(a.matrix(), b.matrix());
    assert_ne!(a.matrix(), c.matrix());
    let gram = a.matrix().dot(&a.matrix().t());
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((gram[[i, j]] - want).abs() < 1e-12);
        }
    }
}
