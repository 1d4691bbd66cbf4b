//! Per-tensor low-rank Adam kernel with error feedback and quasi-hyperbolic
//! momentum, plus a textbook full-rank Adam step used as a reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::projection::Projection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Warmup-then-constant learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { lr, warmup_steps: 0 }
    }

    /// Rate for the 0-based step `t`.
    pub fn at(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            self.lr * (t + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_radius: f64,
    pub omega: f64,
    pub schedule: LrSchedule,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_radius: 1.0,
            omega: 1.0,
            schedule: LrSchedule::constant(1e-2),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(OptimError::InvalidHyper(msg));
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1 must lie in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 must lie in [0, 1), got {}", self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.clip_radius > 0.0) {
            return bad(format!("clip_radius must be positive, got {}", self.clip_radius));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return bad(format!("omega must lie in [0, 1], got {}", self.omega));
        }
        if !(self.schedule.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.schedule.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QhmMode {
    NoQhm,
    LowRank,
    FullRank,
}

/// How the full-rank QHM branch reduces `√v̂+ε` to a scale for `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuSemantics {
    /// Mean over the `r` rows, one scale per column.
    #[default]
    PerColumn,
    /// Mean over every entry.
    Scalar,
}

/// Optimizer state for one parameter matrix on one worker.
#[derive(Debug, Clone)]
pub struct LowRankOptState {
    pub u: Matrix,
    pub v: Matrix,
    pub error: Matrix,
    pub proj: Projection,
    /// Number of moment updates applied so far.
    pub step: u64,
}

impl LowRankOptState {
    pub fn new(proj: Projection, cols: usize) -> Self {
        let (p, r) = (proj.dim(), proj.rank());
        Self {
            u: Matrix::zeros(r, cols),
            v: Matrix::zeros(r, cols),
            error: Matrix::zeros(p, cols),
            proj,
            step: 0,
        }
    }
}

/// `g = Qᵀ(G + E)` and the residual `G + E − Q·g`.
pub fn compress_gradient(grad: &Matrix, state: &LowRankOptState) -> Result<(Matrix, Matrix)> {
    let signal = grad.add(&state.error)?;
    let g = state.proj.down(&signal)?;
    let residual = signal.sub(&state.proj.up(&g)?)?;
    Ok((g, residual))
}

/// Exponential moving averages of `g` and `g∘g`; advances the step counter.
pub fn update_moments(state: &mut LowRankOptState, g: &Matrix, beta1: f64, beta2: f64) -> Result<()> {
    if g.shape() != state.u.shape() {
        return Err(LinalgError::ShapeMismatch {
            op: "update_moments",
            lhs: state.u.shape(),
            rhs: g.shape(),
        }
        .into());
    }
    for ((u, v), &x) in state
        .u
        .as_mut_slice()
        .iter_mut()
        .zip(state.v.as_mut_slice().iter_mut())
        .zip(g.as_slice())
    {
        *u = beta1 * *u + (1.0 - beta1) * x;
        *v = beta2 * *v + (1.0 - beta2) * (x * x);
    }
    state.step += 1;
    Ok(())
}

fn bias_corrections(beta1: f64, beta2: f64, t: u64) -> (f64, f64) {
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    (1.0 - beta1.powi(exp), 1.0 - beta2.powi(exp))
}

/// Update direction for the current step; the caller scales by `η_t` and
/// subtracts it from the parameters. Moments must already include `g`.
pub fn compute_update(
    state: &LowRankOptState,
    grad: &Matrix,
    g: &Matrix,
    mode: QhmMode,
    hp: &HyperParams,
    mu: MuSemantics,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&hp.omega) {
        return Err(OptimError::InvalidHyper(format!("omega must lie in [0, 1], got {}", hp.omega)));
    }
    if !(hp.eps > 0.0) {
        return Err(OptimError::InvalidHyper(format!("eps must be positive, got {}", hp.eps)));
    }
    if state.step == 0 {
        return Err(OptimError::InvalidHyper("moments have not been updated yet".into()));
    }
    let (c1, c2) = bias_corrections(hp.beta1, hp.beta2, state.step);
    let denom = state.v.map(|x| (x / c2).sqrt() + hp.eps);
    let adam_dir = state.u.map(|x| x / c1).hadamard_div(&denom)?;
    let omega = hp.omega;

    // ω = 1 is the plain momentum update in both QHM forms.
    if mode == QhmMode::NoQhm || omega == 1.0 {
        return Ok(state.proj.up(&adam_dir)?);
    }
    match mode {
        QhmMode::NoQhm => unreachable!(),
        QhmMode::LowRank => {
            let mut mixed = state.u.map(|x| omega * (x / c1));
            mixed.axpy(1.0 - omega, g)?;
            Ok(state.proj.up(&mixed.hadamard_div(&denom)?)?)
        }
        QhmMode::FullRank => {
            if grad.shape() != (state.proj.dim(), state.u.cols()) {
                return Err(LinalgError::ShapeMismatch {
                    op: "compute_update",
                    lhs: (state.proj.dim(), state.u.cols()),
                    rhs: grad.shape(),
                }
                .into());
            }
            let scales = column_scales(&denom, mu);
            let mut out = state.proj.up(&adam_dir)?.scale(omega);
            let cols = out.cols();
            for (idx, (o, &x)) in out.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
                *o += (1.0 - omega) * x / scales[idx % cols];
            }
            Ok(out)
        }
    }
}

/// `μ(√v̂+ε)` broadcast to one value per column.
fn column_scales(denom: &Matrix, mu: MuSemantics) -> Vec<f64> {
    let (r, q) = denom.shape();
    match mu {
        MuSemantics::PerColumn => (0..q)
            .map(|j| (0..r).map(|i| denom[(i, j)]).sum::<f64>() / r as f64)
            .collect(),
        MuSemantics::Scalar => {
            let m = denom.as_slice().iter().sum::<f64>() / (r * q) as f64;
            vec![m; q]
        }
    }
}

/// Full-rank Adam with bias correction. `t` is the 1-based step index.
pub fn adam_reference_step(
    x: &Matrix,
    grad: &Matrix,
    u: &Matrix,
    v: &Matrix,
    hp: &HyperParams,
    lr: f64,
    t: u64,
) -> Result<(Matrix, Matrix, Matrix)> {
    if t == 0 {
        return Err(OptimError::InvalidHyper("adam step index is 1-based".into()));
    }
    let mut u_new = u.scale(hp.beta1);
    u_new.axpy(1.0 - hp.beta1, grad)?;
    let mut v_new = v.scale(hp.beta2);
    v_new.axpy(1.0 - hp.beta2, &grad.hadamard(grad)?)?;
    let (c1, c2) = bias_corrections(hp.beta1, hp.beta2, t);
    let denom = v_new.map(|y| (y / c2).sqrt() + hp.eps);
    let dir = u_new.map(|y| y / c1).hadamard_div(&denom)?;
    let mut x_new = x.clone();
    x_new.axpy(-lr, &dir)?;
    Ok((x_new, u_new, v_new))
}
