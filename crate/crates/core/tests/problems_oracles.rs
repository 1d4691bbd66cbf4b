use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lordo::linalg::{self, Matrix};
use lordo::problems::{self, PowerLawOracle, RegressionSpec, ShardPolicy, ShardedRegression};

fn small_problem(seed: u64, policy: ShardPolicy) -> ShardedRegression {
    let spec = RegressionSpec {
        rows: 96,
        p: 8,
        q: 5,
        layers: 2,
        noise_std: 0.3,
        shards: 4,
        policy,
    };
    ShardedRegression::generate(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Entrywise central differences of the batch loss.
fn finite_difference_gradient(problem: &ShardedRegression, params: &[Matrix], worker: usize) -> Vec<Matrix> {
    let batch = problem.full_shard(worker).unwrap();
    let h = 1e-5;
    params
        .iter()
        .enumerate()
        .map(|(l, x)| {
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    let eval = |delta: f64| {
                        let mut moved = params.to_vec();
                        moved[l].as_mut_slice()[i * x.cols() + j] += delta;
                        problem.loss(&moved, &batch).unwrap()
                    };
                    g[(i, j)] = (eval(h) - eval(-h)) / (2.0 * h);
                }
            }
            g
        })
        .collect()
}

#[test]
fn entrywise_finite_differences() {
    for seed in 0..4 {
        let problem = small_problem(seed, ShardPolicy::Iid);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params: Vec<Matrix> = (0..2).map(|_| Matrix::gaussian(8, 5, &mut rng)).collect();
        let worker = seed as usize % 4;
        let analytic = problem
            .stoch_gradient(&params, &problem.full_shard(worker).unwrap())
            .unwrap();
        let numeric = finite_difference_gradient(&problem, &params, worker);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(a.max_abs_diff(n) <= 1e-6 * a.frobenius_norm().max(1.0));
        }
    }
}

#[test]
fn full_loss_matches_direct_evaluation() {
    let problem = small_problem(9, ShardPolicy::Iid);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params: Vec<Matrix> = (0..2).map(|_| Matrix::gaussian(8, 5, &mut rng)).collect();
    // the shards partition the rows evenly, so the full loss is their mean
    let direct = (0..4)
        .map(|m| problem.loss(&params, &problem.full_shard(m).unwrap()).unwrap())
        .sum::<f64>()
        / 4.0;
    let fast = problem.full_loss(&params).unwrap();
    assert!((direct - fast).abs() <= 1e-10 * direct.abs().max(1.0));
}

#[test]
fn optimum_loss_near_noise_floor() {
    let spec = RegressionSpec {
        rows: 8192,
        p: 6,
        q: 4,
        layers: 1,
        noise_std: 0.5,
        shards: 1,
        policy: ShardPolicy::Iid,
    };
    let problem = ShardedRegression::generate(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let at_truth = problem.full_loss(&[problem.x_star(0).clone()]).unwrap();
    // ½·q·σ² per row
    let floor = 0.5 * 4.0 * 0.25;
    assert!((at_truth - floor).abs() < 0.05 * floor, "{at_truth} vs {floor}");
}

#[test]
fn disjoint_blocks_isolate_gradient_rows() {
    let problem = small_problem(5, ShardPolicy::DisjointFeatureBlocks);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params: Vec<Matrix> = (0..2).map(|_| Matrix::gaussian(8, 5, &mut rng)).collect();
    for m in 0..4 {
        let g = problem.stoch_gradient(&params, &problem.full_shard(m).unwrap()).unwrap();
        for i in 0..8 {
            let in_block = i / 2 == m;
            let row_norm: f64 = g[0].row(i).iter().map(|x| x * x).sum();
            assert_eq!(row_norm > 0.0, in_block, "worker {m} row {i}");
        }
    }
}

#[test]
fn noise_norm_concentrates_at_kappa_over_sqrt_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let oracle = PowerLawOracle::new(1.0, 1.0, 32, 24, 2.0, &mut rng).unwrap();
    for batch in [1usize, 16, 256] {
        let trials = 400;
        let mean_sq = (0..trials)
            .map(|_| {
                let obs = oracle.noisy_observation(batch, &mut rng).unwrap();
                obs.sub(oracle.true_gradient()).unwrap().frobenius_norm_sq()
            })
            .sum::<f64>()
            / trials as f64;
        let expected = 4.0 / batch as f64;
        assert!((mean_sq / expected - 1.0).abs() < 0.02, "B = {batch}: {mean_sq} vs {expected}");
    }
}

#[test]
fn power_law_spectrum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = problems::gen_powerlaw_matrix(2.0, 1.5, 12, 9, &mut rng).unwrap();
    let s = linalg::svd(&g).unwrap().s;
    for (i, sigma) in s.iter().enumerate() {
        let want = 2.0 * ((i + 1) as f64).powf(-1.5);
        assert!((sigma - want).abs() < 1e-10, "σ_{} = {sigma}, want {want}", i + 1);
    }
}
