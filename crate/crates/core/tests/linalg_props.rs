use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lordo::linalg::{self, Matrix};

fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        prop::collection::vec(-10.0f64..10.0, m * n).prop_map(move |d| Matrix::from_vec(m, n, d).unwrap())
    })
}

/// Low-rank products exercise the zero-singular-value completion path.
fn low_rank_strategy(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max, 1usize..=3).prop_flat_map(|(m, n, k)| {
        (
            prop::collection::vec(-3.0f64..3.0, m * k),
            prop::collection::vec(-3.0f64..3.0, k * n),
        )
            .prop_map(move |(a, b)| {
                let a = Matrix::from_vec(m, k, a).unwrap();
                let b = Matrix::from_vec(k, n, b).unwrap();
                a.matmul(&b).unwrap()
            })
    })
}

fn orthonormality_error(q: &Matrix) -> f64 {
    q.t_matmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
}

fn check_svd(a: &Matrix) -> Result<(), TestCaseError> {
    let svd = linalg::svd(a).unwrap();
    let k = a.rows().min(a.cols());
    prop_assert_eq!(svd.s.len(), k);
    prop_assert_eq!(svd.u.shape(), (a.rows(), k));
    prop_assert_eq!(svd.v.shape(), (a.cols(), k));
    prop_assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    prop_assert!(svd.s.iter().all(|&s| s >= 0.0));
    let scale = a.frobenius_norm().max(1.0);
    prop_assert!(svd.reconstruct().max_abs_diff(a) <= 1e-10 * scale);
    prop_assert!(orthonormality_error(&svd.u) <= 1e-10);
    prop_assert!(orthonormality_error(&svd.v) <= 1e-10);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn svd_invariants(a in matrix_strategy(32)) {
        check_svd(&a)?;
    }

    #[test]
    fn svd_invariants_low_rank(a in low_rank_strategy(24)) {
        check_svd(&a)?;
        let rank = linalg::numerical_rank(&a, 1e-10).unwrap();
        prop_assert!(rank <= 3);
    }

    #[test]
    fn norm_inequalities(a in matrix_strategy(16)) {
        let spec = linalg::spectral_norm(&a).unwrap();
        let fro = linalg::frobenius_norm(&a);
        let rank = linalg::numerical_rank(&a, 1e-12).unwrap().max(1) as f64;
        prop_assert!(spec <= fro * (1.0 + 1e-12) + 1e-12);
        prop_assert!(fro <= rank.sqrt() * spec * (1.0 + 1e-10) + 1e-12);
        let max_entry = a.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(max_entry <= spec * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction(a in matrix_strategy(12), radius in 0.01f64..20.0) {
        let c = linalg::clip_frobenius(&a, radius).unwrap();
        prop_assert!(c.frobenius_norm() <= radius * (1.0 + 1e-12));
        if a.frobenius_norm() <= radius {
            prop_assert_eq!(&c, &a);
        } else {
            let ratio = radius / a.frobenius_norm();
            prop_assert!(c.max_abs_diff(&a.scale(ratio)) <= 1e-12 * a.frobenius_norm());
        }
    }

    #[test]
    fn transpose_product_matches_explicit(a in matrix_strategy(10), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::gaussian(a.rows(), 3, &mut rng);
        let direct = a.transpose().matmul(&b).unwrap();
        prop_assert!(a.t_matmul(&b).unwrap().max_abs_diff(&direct) <= 1e-12);
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut s: Vec<Vec<f64>>) -> Vec<f64> {
    let n = s.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i][j] * s[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if s[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (s[q][q] - s[p][p]) / (2.0 * s[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (a, b) = (s[k][p], s[k][q]);
                    s[k][p] = c * a - sn * b;
                    s[k][q] = sn * a + c * b;
                }
                for k in 0..n {
                    let (a, b) = (s[p][k], s[q][k]);
                    s[p][k] = c * a - sn * b;
                    s[q][k] = sn * a + c * b;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| s[i][i]).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    for seed in [42u64, 7] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::gaussian(8, 6, &mut rng);
        let gram: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| (0..8).map(|k| a[(k, i)] * a[(k, j)]).sum()).collect())
            .collect();
        let expected: Vec<f64> = symmetric_eigenvalues(gram).into_iter().map(|e| e.max(0.0).sqrt()).collect();
        let s = linalg::svd(&a).unwrap().s;
        for (got, want) in s.iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn svd_is_deterministic_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Matrix::gaussian(20, 13, &mut rng);
    let first = linalg::svd(&a).unwrap();
    let second = linalg::svd(&a).unwrap();
    assert_eq!(first.u, second.u);
    assert_eq!(first.s, second.s);
    assert_eq!(first.v, second.v);
}

#[test]
fn svd_rejects_non_finite() {
    let a = Matrix::from_rows(&[[1.0, f64::NAN], [0.0, 1.0]]);
    assert!(linalg::svd(&a).is_err());
}
