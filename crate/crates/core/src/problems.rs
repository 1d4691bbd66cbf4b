//! Synthetic matrix-valued objectives.
//!
//! [`ShardedRegression`] is the end-to-end training problem: a global design
//! split into contiguous row shards, one per worker, with per-layer targets
//! `Y_l = A·X*_l + noise`. [`PowerLawOracle`] produces noisy observations of
//! a gradient with a prescribed power-law spectrum for projection-stability
//! studies.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch index {index} outside shard of {len} rows")]
    IndexOutOfShard { index: usize, len: usize },
    #[error("worker {0} has no shard")]
    UnknownWorker(usize),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// How feature columns relate to shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardPolicy {
    /// Every shard sees every feature.
    #[default]
    Iid,
    /// Shard `m` only has nonzero design entries in feature block `m`, so
    /// worker gradients live in mutually orthogonal row blocks.
    DisjointFeatureBlocks,
}

/// Row indices into one worker's shard.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub worker_id: usize,
    pub rows: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RegressionSpec {
    pub rows: usize,
    pub p: usize,
    pub q: usize,
    pub layers: usize,
    pub noise_std: f64,
    pub shards: usize,
    pub policy: ShardPolicy,
}

#[derive(Debug, Clone)]
struct Layer {
    targets: Matrix,
    x_star: Matrix,
    // Moments for evaluating the full-data loss in O(p²q):
    // ½⟨X, H X⟩ − ⟨X, C⟩ + c0 with H = AᵀA/n, C = AᵀY/n, c0 = ‖Y‖²/2n.
    cross: Matrix,
    offset: f64,
}

/// Least squares `½‖A X − Y‖²` per layer, sharded by rows across workers.
#[derive(Debug, Clone)]
pub struct ShardedRegression {
    design: Matrix,
    layers: Vec<Layer>,
    shards: Vec<Range<usize>>,
    gram: Matrix,
    noise_std: f64,
}

impl ShardedRegression {
    pub fn generate<R: Rng + ?Sized>(spec: &RegressionSpec, rng: &mut R) -> Result<Self> {
        let RegressionSpec {
            rows,
            p,
            q,
            layers,
            noise_std,
            shards,
            policy,
        } = *spec;
        if p == 0 || q == 0 || layers == 0 || shards == 0 {
            return Err(ProblemError::Invalid("dimensions must be positive".into()));
        }
        if rows < shards {
            return Err(ProblemError::Invalid(format!("{rows} rows cannot fill {shards} shards")));
        }
        if !(noise_std >= 0.0) {
            return Err(ProblemError::Invalid(format!("noise_std must be >= 0, got {noise_std}")));
        }
        if policy == ShardPolicy::DisjointFeatureBlocks && p < shards {
            return Err(ProblemError::Invalid(format!("{p} features cannot form {shards} blocks")));
        }
        let shard_ranges = split_even(rows, shards);
        let mut design = Matrix::gaussian(rows, p, rng);
        if policy == ShardPolicy::DisjointFeatureBlocks {
            let blocks = split_even(p, shards);
            for (shard, block) in shard_ranges.iter().zip(&blocks) {
                for i in shard.clone() {
                    for j in 0..p {
                        if !block.contains(&j) {
                            design[(i, j)] = 0.0;
                        }
                    }
                }
            }
        }
        let mut out = Self {
            gram: design.t_matmul(&design)?.scale(1.0 / rows as f64),
            design,
            layers: Vec::with_capacity(layers),
            shards: shard_ranges,
            noise_std,
        };
        for _ in 0..layers {
            let x_star = Matrix::gaussian(p, q, rng).scale(1.0 / (p as f64).sqrt());
            let mut targets = out.design.matmul(&x_star)?;
            for y in targets.as_mut_slice() {
                let z: f64 = rng.sample(StandardNormal);
                *y += noise_std * z;
            }
            out.push_layer(x_star, targets)?;
        }
        Ok(out)
    }

    /// Builds a single-shard, single-layer problem from explicit data.
    pub fn from_parts(design: Matrix, targets: Matrix, x_star: Matrix) -> Result<Self> {
        if design.rows() != targets.rows() || design.cols() != x_star.rows() || x_star.cols() != targets.cols() {
            return Err(ProblemError::Invalid("inconsistent design/target shapes".into()));
        }
        let n = design.rows();
        let mut out = Self {
            gram: design.t_matmul(&design)?.scale(1.0 / n as f64),
            design,
            layers: Vec::new(),
            shards: vec![0..n],
            noise_std: 0.0,
        };
        out.push_layer(x_star, targets)?;
        Ok(out)
    }

    fn push_layer(&mut self, x_star: Matrix, targets: Matrix) -> Result<()> {
        let n = self.design.rows() as f64;
        let cross = self.design.t_matmul(&targets)?.scale(1.0 / n);
        let offset = targets.frobenius_norm_sq() / (2.0 * n);
        self.layers.push(Layer {
            targets,
            x_star,
            cross,
            offset,
        });
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_len(&self, worker: usize) -> Result<usize> {
        self.shards
            .get(worker)
            .map(|r| r.len())
            .ok_or(ProblemError::UnknownWorker(worker))
    }

    pub fn param_shape(&self) -> (usize, usize) {
        let l = &self.layers[0];
        l.x_star.shape()
    }

    pub fn x_star(&self, layer: usize) -> &Matrix {
        &self.layers[layer].x_star
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Uniform draw of `size` rows (with replacement) from a shard.
    pub fn sample_batch<R: Rng + ?Sized>(&self, worker: usize, size: usize, rng: &mut R) -> Result<Batch> {
        let len = self.shard_len(worker)?;
        Ok(Batch {
            worker_id: worker,
            rows: (0..size).map(|_| rng.random_range(0..len)).collect(),
        })
    }

    /// Every row of a shard, in order.
    pub fn full_shard(&self, worker: usize) -> Result<Batch> {
        let len = self.shard_len(worker)?;
        Ok(Batch {
            worker_id: worker,
            rows: (0..len).collect(),
        })
    }

    fn global_rows(&self, batch: &Batch) -> Result<Vec<usize>> {
        if batch.is_empty() {
            return Err(ProblemError::EmptyBatch);
        }
        let shard = self
            .shards
            .get(batch.worker_id)
            .ok_or(ProblemError::UnknownWorker(batch.worker_id))?;
        batch
            .rows
            .iter()
            .map(|&i| {
                if i < shard.len() {
                    Ok(shard.start + i)
                } else {
                    Err(ProblemError::IndexOutOfShard {
                        index: i,
                        len: shard.len(),
                    })
                }
            })
            .collect()
    }

    /// Residual rows `A_b X − Y_b` for one layer.
    fn residual(&self, layer: usize, x: &Matrix, rows: &[usize]) -> Result<Matrix> {
        let l = &self.layers[layer];
        let (p, q) = l.x_star.shape();
        if x.shape() != (p, q) {
            return Err(LinalgError::ShapeMismatch {
                op: "residual",
                lhs: (p, q),
                rhs: x.shape(),
            }
            .into());
        }
        let mut out = Matrix::zeros(rows.len(), q);
        for (b, &i) in rows.iter().enumerate() {
            let a_row = self.design.row(i);
            let dst = &mut out.as_mut_slice()[b * q..(b + 1) * q];
            dst.copy_from_slice(l.targets.row(i));
            for v in dst.iter_mut() {
                *v = -*v;
            }
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &xv) in dst.iter_mut().zip(x.row(k)) {
                    *d += a * xv;
                }
            }
        }
        Ok(out)
    }

    /// `(1/2B)‖A_b X − Y_b‖²` for one layer.
    pub fn layer_loss(&self, layer: usize, x: &Matrix, batch: &Batch) -> Result<f64> {
        let rows = self.global_rows(batch)?;
        let res = self.residual(layer, x, &rows)?;
        Ok(res.frobenius_norm_sq() / (2.0 * rows.len() as f64))
    }

    /// `(1/B) A_bᵀ(A_b X − Y_b)` for one layer.
    pub fn layer_gradient(&self, layer: usize, x: &Matrix, batch: &Batch) -> Result<Matrix> {
        let rows = self.global_rows(batch)?;
        let res = self.residual(layer, x, &rows)?;
        let (p, q) = x.shape();
        let mut grad = Matrix::zeros(p, q);
        for (b, &i) in rows.iter().enumerate() {
            let r_row = res.row(b);
            for (k, &a) in self.design.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let g_row = &mut grad.as_mut_slice()[k * q..(k + 1) * q];
                for (g, &rv) in g_row.iter_mut().zip(r_row) {
                    *g += a * rv;
                }
            }
        }
        Ok(grad.scale(1.0 / rows.len() as f64))
    }

    /// Sum of layer losses on a batch.
    pub fn loss(&self, params: &[Matrix], batch: &Batch) -> Result<f64> {
        self.check_layers(params)?;
        params
            .iter()
            .enumerate()
            .map(|(l, x)| self.layer_loss(l, x, batch))
            .sum()
    }

    /// Per-layer stochastic gradients on a batch.
    pub fn stoch_gradient(&self, params: &[Matrix], batch: &Batch) -> Result<Vec<Matrix>> {
        self.check_layers(params)?;
        params
            .iter()
            .enumerate()
            .map(|(l, x)| self.layer_gradient(l, x, batch))
            .collect()
    }

    /// Loss over every row of every shard: `(1/2n)Σ_l‖A X_l − Y_l‖²`.
    pub fn full_loss(&self, params: &[Matrix]) -> Result<f64> {
        self.check_layers(params)?;
        let mut total = 0.0;
        for (l, x) in params.iter().enumerate() {
            let layer = &self.layers[l];
            let hx = self.gram.matmul(x)?;
            let quad: f64 = x.as_slice().iter().zip(hx.as_slice()).map(|(a, b)| a * b).sum();
            let lin: f64 = x.as_slice().iter().zip(layer.cross.as_slice()).map(|(a, b)| a * b).sum();
            total += 0.5 * quad - lin + layer.offset;
        }
        Ok(total)
    }

    fn check_layers(&self, params: &[Matrix]) -> Result<()> {
        if params.len() != self.layers.len() {
            return Err(ProblemError::Invalid(format!(
                "expected {} layers, got {}",
                self.layers.len(),
                params.len()
            )));
        }
        Ok(())
    }
}

/// Splits `0..n` into `k` contiguous ranges whose sizes differ by at most 1.
fn split_even(n: usize, k: usize) -> Vec<Range<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Random `p × k` matrix with orthonormal columns.
fn random_orthonormal<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R) -> Matrix {
    loop {
        if let Some(q) = linalg::orthonormalize_columns(&Matrix::gaussian(p, k, rng)) {
            return q;
        }
    }
}

/// `U·diag(C·k^{−α})·Vᵀ` with seeded random orthonormal factors.
pub fn gen_powerlaw_matrix<R: Rng + ?Sized>(c: f64, alpha: f64, p: usize, q: usize, rng: &mut R) -> Result<Matrix> {
    if !(c > 0.0) || !(alpha > 0.0) {
        return Err(ProblemError::Invalid(format!("C and alpha must be positive, got {c}, {alpha}")));
    }
    let k = p.min(q);
    let mut u = random_orthonormal(p, k, rng);
    let v = random_orthonormal(q, k, rng);
    for j in 0..k {
        let sigma = c * ((j + 1) as f64).powf(-alpha);
        for i in 0..p {
            u[(i, j)] *= sigma;
        }
    }
    Ok(u.matmul(&v.transpose())?)
}

/// Gradient with a power-law spectrum observed through additive Gaussian
/// noise whose Frobenius norm concentrates at `κ/√B`.
#[derive(Debug, Clone)]
pub struct PowerLawOracle {
    pub c: f64,
    pub alpha: f64,
    pub kappa: f64,
    true_grad: Matrix,
}

impl PowerLawOracle {
    pub fn new<R: Rng + ?Sized>(c: f64, alpha: f64, p: usize, q: usize, kappa: f64, rng: &mut R) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(ProblemError::Invalid(format!("kappa must be >= 0, got {kappa}")));
        }
        Ok(Self {
            c,
            alpha,
            kappa,
            true_grad: gen_powerlaw_matrix(c, alpha, p, q, rng)?,
        })
    }

    pub fn true_gradient(&self) -> &Matrix {
        &self.true_grad
    }

    /// `G + N` with `N_ij ~ N(0, κ²/(B·p·q))`.
    pub fn noisy_observation<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Matrix> {
        if batch == 0 {
            return Err(ProblemError::EmptyBatch);
        }
        if self.kappa == 0.0 {
            return Ok(self.true_grad.clone());
        }
        let (p, q) = self.true_grad.shape();
        let std = self.kappa / ((batch * p * q) as f64).sqrt();
        let mut out = self.true_grad.clone();
        for x in out.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{spectral_gap, stable_rank};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, noise: f64) -> ShardedRegression {
        let spec = RegressionSpec {
            rows: 40,
            p: 5,
            q: 3,
            layers: 1,
            noise_std: noise,
            shards: 2,
            policy: ShardPolicy::Iid,
        };
        ShardedRegression::generate(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn optimum_has_zero_loss_and_gradient_without_noise() {
        let prob = small(1, 0.0);
        let x = vec![prob.x_star(0).clone()];
        let batch = prob.full_shard(1).unwrap();
        assert!(prob.loss(&x, &batch).unwrap() < 1e-28);
        assert!(prob.stoch_gradient(&x, &batch).unwrap()[0].frobenius_norm() < 1e-14);
        assert!(prob.full_loss(&x).unwrap().abs() < 1e-14);
    }

    #[test]
    fn identity_design_loss() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]);
        let prob = ShardedRegression::from_parts(Matrix::identity(2), Matrix::zeros(2, 2), Matrix::zeros(2, 2)).unwrap();
        let full = prob.full_shard(0).unwrap();
        assert!((prob.loss(std::slice::from_ref(&x), &full).unwrap() - 0.5 * x.frobenius_norm_sq() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_double_loop() {
        let prob = small(3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::gaussian(5, 3, &mut rng);
        let batch = prob.sample_batch(0, 7, &mut rng).unwrap();
        let shard_start = 0;
        let layer = &prob.layers[0];
        let mut naive = 0.0;
        for &i in &batch.rows {
            for j in 0..3 {
                let mut pred = 0.0;
                for k in 0..5 {
                    pred += prob.design[(shard_start + i, k)] * x[(k, j)];
                }
                let r = pred - layer.targets[(shard_start + i, j)];
                naive += r * r;
            }
        }
        naive /= 2.0 * batch.len() as f64;
        assert!((prob.loss(&[x], &batch).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn full_batch_gradient_is_mean_of_halves() {
        let prob = small(5, 0.1);
        let x = vec![Matrix::gaussian(5, 3, &mut ChaCha8Rng::seed_from_u64(1))];
        let len = prob.shard_len(0).unwrap();
        let full = prob.full_shard(0).unwrap();
        let a = Batch { worker_id: 0, rows: (0..len / 2).collect() };
        let b = Batch { worker_id: 0, rows: (len / 2..len).collect() };
        let gf = &prob.stoch_gradient(&x, &full).unwrap()[0];
        let ga = &prob.stoch_gradient(&x, &a).unwrap()[0];
        let gb = &prob.stoch_gradient(&x, &b).unwrap()[0];
        let mean = ga.add(gb).unwrap().scale(0.5);
        assert!(gf.max_abs_diff(&mean) < 1e-13);
    }

    #[test]
    fn full_loss_matches_sum_of_shards() {
        let prob = small(6, 0.2);
        let x = vec![Matrix::gaussian(5, 3, &mut ChaCha8Rng::seed_from_u64(2))];
        let mut total = 0.0;
        let mut rows = 0;
        for m in 0..2 {
            let b = prob.full_shard(m).unwrap();
            total += prob.loss(&x, &b).unwrap() * b.len() as f64;
            rows += b.len();
        }
        assert!((prob.full_loss(&x).unwrap() - total / rows as f64).abs() < 1e-12);
    }

    #[test]
    fn batch_errors() {
        let prob = small(1, 0.0);
        let x = vec![Matrix::zeros(5, 3)];
        let empty = Batch { worker_id: 0, rows: vec![] };
        assert_eq!(prob.loss(&x, &empty), Err(ProblemError::EmptyBatch));
        assert!(prob.stoch_gradient(&x, &empty).is_err());
        let out = Batch { worker_id: 0, rows: vec![1000] };
        assert!(matches!(prob.loss(&x, &out), Err(ProblemError::IndexOutOfShard { .. })));
        assert!(prob.sample_batch(7, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn disjoint_blocks_give_block_gradients() {
        let spec = RegressionSpec {
            rows: 64,
            p: 8,
            q: 3,
            layers: 1,
            noise_std: 0.1,
            shards: 4,
            policy: ShardPolicy::DisjointFeatureBlocks,
        };
        let prob = ShardedRegression::generate(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = vec![Matrix::zeros(8, 3)];
        for m in 0..4 {
            let g = &prob.stoch_gradient(&x, &prob.full_shard(m).unwrap()).unwrap()[0];
            for i in 0..8 {
                let row_norm: f64 = g.row(i).iter().map(|v| v * v).sum();
                if i / 2 == m {
                    assert!(row_norm > 0.0);
                } else {
                    assert_eq!(row_norm, 0.0);
                }
            }
        }
    }

    #[test]
    fn powerlaw_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = gen_powerlaw_matrix(2.0, 0.7, 12, 9, &mut rng).unwrap();
        let s = linalg::svd(&g).unwrap().s;
        for (k, &x) in s.iter().enumerate() {
            assert!((x - 2.0 * ((k + 1) as f64).powf(-0.7)).abs() < 1e-10);
        }
        let gap = spectral_gap(&s, 3).unwrap();
        assert!((gap - 2.0 * (3f64.powf(-0.7) - 4f64.powf(-0.7))).abs() < 1e-10);
        assert!(gen_powerlaw_matrix(0.0, 1.0, 3, 3, &mut rng).is_err());
    }

    #[test]
    fn stable_rank_decreases_with_alpha() {
        let sr: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&a| {
                let g = gen_powerlaw_matrix(1.0, a, 32, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
                stable_rank(&g).unwrap()
            })
            .collect();
        assert!(sr[0] > sr[1] && sr[1] > sr[2], "{sr:?}");
    }

    #[test]
    fn noiseless_oracle_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let o = PowerLawOracle::new(1.0, 1.0, 6, 6, 0.0, &mut rng).unwrap();
        assert_eq!(&o.noisy_observation(3, &mut rng).unwrap(), o.true_gradient());
        assert!(o.noisy_observation(0, &mut rng).is_err());
    }
}
