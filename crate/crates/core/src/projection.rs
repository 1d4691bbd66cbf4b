//! Truncated projection bases, moment rotation between bases, and the
//! subspace diagnostics logged by the simulator.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};

/// Singular values at or below this fraction of σ₁ count as absent when
/// deciding whether a signal can support a rank-r basis.
pub const DEGENERATE_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("rank {rank} out of range for a {rows}x{cols} signal")]
    RankOutOfRange { rank: usize, rows: usize, cols: usize },
    #[error("degenerate signal: sigma_{rank} = {sigma_r:e} relative to sigma_1 = {sigma_1:e}")]
    Degenerate { rank: usize, sigma_r: f64, sigma_1: f64 },
    #[error("basis mismatch: {lhs:?} vs {rhs:?}")]
    BasisMismatch { lhs: (usize, usize), rhs: (usize, usize) },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, ProjectionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSource {
    AggregatedPseudoGradient,
    LocalGradientWithEf,
    RandomInit,
    Identity,
}

/// Column-orthonormal `p × r` basis plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    q: Matrix,
    pub computed_at_step: u64,
    pub source: ProjectionSource,
}

impl Projection {
    /// First `r` columns of `I_p`.
    pub fn identity(p: usize, r: usize) -> Self {
        assert!(r >= 1 && r <= p, "rank {r} out of range for p = {p}");
        Self {
            q: Matrix::eye(p, r),
            computed_at_step: 0,
            source: ProjectionSource::Identity,
        }
    }

    /// Gaussian `p × r` matrix orthonormalized by Gram–Schmidt.
    pub fn random<R: Rng + ?Sized>(p: usize, r: usize, rng: &mut R) -> Self {
        assert!(r >= 1 && r <= p, "rank {r} out of range for p = {p}");
        loop {
            let g = Matrix::gaussian(p, r, rng);
            if let Some(q) = linalg::orthonormalize_columns(&g) {
                return Self {
                    q,
                    computed_at_step: 0,
                    source: ProjectionSource::RandomInit,
                };
            }
        }
    }

    /// Wraps an existing basis after checking orthonormality to 1e-10.
    pub fn from_basis(q: Matrix, computed_at_step: u64, source: ProjectionSource) -> Result<Self> {
        let gram = q.t_matmul(&q)?;
        let err = gram.sub(&Matrix::identity(q.cols()))?.frobenius_norm();
        if err > 1e-10 || q.cols() > q.rows() {
            return Err(ProjectionError::InvalidArgument(format!(
                "basis is not column-orthonormal (error {err:e})"
            )));
        }
        Ok(Self {
            q,
            computed_at_step,
            source,
        })
    }

    pub fn basis(&self) -> &Matrix {
        &self.q
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    /// `Qᵀ·x`
    pub fn down(&self, x: &Matrix) -> std::result::Result<Matrix, LinalgError> {
        self.q.t_matmul(x)
    }

    /// `Q·x`
    pub fn up(&self, x: &Matrix) -> std::result::Result<Matrix, LinalgError> {
        self.q.matmul(x)
    }
}

/// Projection together with the spectrum of the signal it came from.
#[derive(Debug, Clone)]
pub struct ComputedProjection {
    pub projection: Projection,
    pub singular_values: Vec<f64>,
}

/// Leading `r` left singular vectors of `signal`.
pub fn compute_projection(
    signal: &Matrix,
    r: usize,
    step: u64,
    source: ProjectionSource,
) -> Result<ComputedProjection> {
    let (p, q) = signal.shape();
    if r == 0 || r > p.min(q) {
        return Err(ProjectionError::RankOutOfRange { rank: r, rows: p, cols: q });
    }
    let svd = linalg::svd(signal)?;
    let sigma_1 = svd.s[0];
    let sigma_r = svd.s[r - 1];
    if !(sigma_1 > 0.0) || sigma_r <= DEGENERATE_REL_TOL * sigma_1 {
        return Err(ProjectionError::Degenerate { rank: r, sigma_r, sigma_1 });
    }
    Ok(ComputedProjection {
        projection: Projection {
            q: svd.u.leading_columns(r),
            computed_at_step: step,
            source,
        },
        singular_values: svd.s,
    })
}

fn check_compatible(a: &Projection, b: &Projection) -> Result<()> {
    if a.q.shape() != b.q.shape() {
        return Err(ProjectionError::BasisMismatch {
            lhs: a.q.shape(),
            rhs: b.q.shape(),
        });
    }
    Ok(())
}

/// `R = Q_newᵀ · Q_old`
pub fn rotation_matrix(new: &Projection, old: &Projection) -> Result<Matrix> {
    check_compatible(new, old)?;
    Ok(new.q.t_matmul(&old.q)?)
}

/// Mean squared singular value, `‖R‖_F² / r`.
pub fn mssv(r: &Matrix) -> f64 {
    r.frobenius_norm_sq() / r.cols().min(r.rows()) as f64
}

/// `‖U‖_F² / ‖U‖₂²`; the zero matrix reports 0.
pub fn stable_rank(u: &Matrix) -> Result<f64> {
    let s = linalg::svd(u)?.s;
    Ok(stable_rank_from_singular_values(&s))
}

pub fn stable_rank_from_singular_values(s: &[f64]) -> f64 {
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        log::warn!("stable rank of a zero matrix; reporting 0");
        return 0.0;
    }
    s.iter().map(|x| x * x).sum::<f64>() / (top * top)
}

/// `σ_r − σ_{r+1}` with 1-based `r`.
pub fn spectral_gap(s: &[f64], r: usize) -> Result<f64> {
    if r == 0 || r >= s.len() {
        return Err(ProjectionError::InvalidArgument(format!(
            "spectral gap needs 1 <= r < {}, got {r}",
            s.len()
        )));
    }
    Ok(s[r - 1] - s[r])
}

/// `‖sin Θ‖_F = sqrt(r − ‖Q₁ᵀQ₂‖_F²)`, clamped at zero.
pub fn sin_theta_distance(a: &Projection, b: &Projection) -> Result<f64> {
    check_compatible(a, b)?;
    let overlap = a.q.t_matmul(&b.q)?.frobenius_norm_sq();
    Ok((a.rank() as f64 - overlap).max(0.0).sqrt())
}

/// `R · u`
pub fn rotate_first_moment(rot: &Matrix, u: &Matrix) -> Result<Matrix> {
    Ok(rot.matmul(u)?)
}

/// Carries the second moment into a new basis.
///
/// With bias-corrected `û = u/(1−β₁ᵗ)` and `v̂ = v/(1−β₂ᵗ)`, returns
/// `(1−β₂ᵗ)·|(R∘R)(v̂ − û∘û) + (Rû)∘(Rû)|`. `R∘R` is the entrywise square of
/// `R` applied as a matrix product, i.e. variance propagation through a
/// linear map with independent coordinates.
pub fn rotate_second_moment(
    rot: &Matrix,
    u: &Matrix,
    v: &Matrix,
    beta1: f64,
    beta2: f64,
    t: u64,
) -> Result<Matrix> {
    if t == 0 {
        return Err(ProjectionError::InvalidArgument("step must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
        return Err(ProjectionError::InvalidArgument(format!(
            "decay rates must lie in [0, 1), got beta1 = {beta1}, beta2 = {beta2}"
        )));
    }
    if u.shape() != v.shape() {
        return Err(LinalgError::ShapeMismatch {
            op: "rotate_second_moment",
            lhs: u.shape(),
            rhs: v.shape(),
        }
        .into());
    }
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(exp);
    let c2 = 1.0 - beta2.powi(exp);
    let u_hat = u.scale(1.0 / c1);
    let v_hat = v.scale(1.0 / c2);
    let centered = v_hat.sub(&u_hat.hadamard(&u_hat)?)?;
    let rot_sq = rot.map(|x| x * x);
    let spread = rot_sq.matmul(&centered)?;
    let mean = rot.matmul(&u_hat)?;
    let out = spread.add(&mean.hadamard(&mean)?)?;
    Ok(out.map(|x| c2 * x.abs()))
}

/// First-order estimate of basis instability under additive noise:
/// `κ/(α·C·√B) · r^{α+1}`.
pub fn predicted_instability(kappa: f64, batch: f64, alpha: f64, c: f64, r: f64) -> Result<f64> {
    for (name, x) in [("kappa", kappa), ("batch", batch), ("alpha", alpha), ("C", c), ("r", r)] {
        if !(x > 0.0) {
            return Err(ProjectionError::InvalidArgument(format!("{name} must be positive, got {x}")));
        }
    }
    Ok(kappa / (alpha * c * batch.sqrt()) * r.powf(alpha + 1.0))
}

/// Diagnostics recorded at every projection update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMetrics {
    pub mssv: f64,
    pub stable_rank: f64,
    pub spectral_gap: f64,
    pub sin_theta: f64,
}

impl SubspaceMetrics {
    /// Metrics for a basis change `old → new.projection`; stable rank and
    /// spectral gap describe the signal `new` was computed from.
    pub fn for_update(new: &ComputedProjection, old: &Projection) -> Result<Self> {
        let r = new.projection.rank();
        let rot = rotation_matrix(&new.projection, old)?;
        let gap = if r < new.singular_values.len() {
            spectral_gap(&new.singular_values, r)?
        } else {
            new.singular_values[r - 1]
        };
        Ok(Self {
            mssv: mssv(&rot),
            stable_rank: stable_rank_from_singular_values(&new.singular_values),
            spectral_gap: gap,
            sin_theta: sin_theta_distance(&new.projection, old)?,
        })
    }
}
