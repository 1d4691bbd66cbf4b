//! Closed-form communication and memory accounting.
//!
//! Asymptotic table entries are instantiated with unit constants, so every
//! count is an exact number of scalars per payload and per link. Byte totals
//! multiply by `element_size`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ProjectionStrategy;
use crate::optimizer::QhmMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid cost inputs: {0}")]
    InvalidInputs(String),
    #[error("invalid combination: {0}")]
    InvalidCombination(String),
}

pub type Result<T> = std::result::Result<T, CostError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub p: u64,
    pub q: u64,
    pub r: u64,
    pub k_x: u64,
    pub k_u: u64,
    pub k_v: u64,
    pub workers: u64,
    pub element_size: u64,
}

impl CostInputs {
    pub fn new(p: u64, q: u64, r: u64, k: u64) -> Self {
        Self {
            p,
            q,
            r,
            k_x: k,
            k_u: k,
            k_v: k,
            workers: 1,
            element_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(CostError::InvalidInputs("p and q must be positive".into()));
        }
        if self.r > self.p.min(self.q) {
            return Err(CostError::InvalidInputs(format!(
                "r = {} exceeds min(p, q) = {}",
                self.r,
                self.p.min(self.q)
            )));
        }
        if self.k_x == 0 || self.k_u == 0 || self.k_v == 0 {
            return Err(CostError::InvalidInputs("sync periods must be >= 1".into()));
        }
        if self.element_size == 0 {
            return Err(CostError::InvalidInputs("element_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which training method a payload or memory figure describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Lordo { strategy: ProjectionStrategy, qhm: QhmMode },
    /// Local full-rank Adam with parameters and both moments synchronized.
    LocalAdam,
    /// Per-step gradient all-reduce.
    Ddp,
}

/// Scalars moved per sync event, split by what is being sent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadBreakdown {
    pub params: u64,
    pub first_moment: u64,
    pub second_moment: u64,
    pub projection: u64,
}

impl PayloadBreakdown {
    pub fn total(&self) -> u64 {
        self.params + self.first_moment + self.second_moment + self.projection
    }

    /// Elements moved on a step where the given quantities synchronize.
    /// Projections travel with the parameter payload.
    pub fn on_step(&self, sync_x: bool, sync_u: bool, sync_v: bool) -> u64 {
        let mut n = 0;
        if sync_x {
            n += self.params + self.projection;
        }
        if sync_u {
            n += self.first_moment;
        }
        if sync_v {
            n += self.second_moment;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadCosts {
    pub uplink: PayloadBreakdown,
    pub downlink: PayloadBreakdown,
}

fn breakdown(params: u64, first_moment: u64, second_moment: u64, projection: u64) -> PayloadBreakdown {
    PayloadBreakdown {
        params,
        first_moment,
        second_moment,
        projection,
    }
}

/// Per-link element counts for one sync of each quantity.
pub fn per_payload(method: Method, inputs: &CostInputs) -> Result<PayloadCosts> {
    inputs.validate()?;
    let CostInputs { p, q, r, .. } = *inputs;
    let (pq, pr, rq) = (p * q, p * r, r * q);
    let costs = match method {
        Method::Ddp => PayloadCosts {
            uplink: breakdown(pq, 0, 0, 0),
            downlink: breakdown(pq, 0, 0, 0),
        },
        Method::LocalAdam => PayloadCosts {
            uplink: breakdown(pq, pq, pq, 0),
            downlink: breakdown(pq, pq, pq, 0),
        },
        Method::Lordo { strategy, qhm } => {
            if r == 0 {
                return Err(CostError::InvalidInputs("low-rank methods need r >= 1".into()));
            }
            match (strategy, qhm) {
                // low-rank accumulated pseudo-gradient up; the new global basis comes down
                (ProjectionStrategy::Global, QhmMode::NoQhm | QhmMode::LowRank) => PayloadCosts {
                    uplink: breakdown(rq, rq, rq, 0),
                    downlink: breakdown(rq, rq, rq, pr),
                },
                (ProjectionStrategy::Global, QhmMode::FullRank) => PayloadCosts {
                    uplink: breakdown(pq, rq, rq, 0),
                    downlink: breakdown(pq, rq, rq, pr),
                },
                // each worker ships its own basis with the low-rank accumulator
                (ProjectionStrategy::Local, QhmMode::NoQhm | QhmMode::LowRank) => PayloadCosts {
                    uplink: breakdown(rq, rq, rq, pr),
                    downlink: breakdown(pq, rq, rq, 0),
                },
                (ProjectionStrategy::Local, QhmMode::FullRank) => PayloadCosts {
                    uplink: breakdown(pq, rq, rq, 0),
                    downlink: breakdown(pq, rq, rq, 0),
                },
            }
        }
    };
    Ok(costs)
}

/// Uplink and downlink elements accumulated over `steps` steps on one link.
pub fn analytic_totals(method: Method, inputs: &CostInputs, steps: u64) -> Result<(u64, u64)> {
    let costs = per_payload(method, inputs)?;
    let nx = steps / inputs.k_x;
    let nu = steps / inputs.k_u;
    let nv = steps / inputs.k_v;
    let total = |b: &PayloadBreakdown| {
        nx * (b.params + b.projection) + nu * b.first_moment + nv * b.second_moment
    };
    Ok((total(&costs.uplink), total(&costs.downlink)))
}

fn as_f64(inputs: &CostInputs) -> (f64, f64, f64, f64, f64, f64) {
    (
        inputs.p as f64,
        inputs.q as f64,
        inputs.r as f64,
        inputs.k_x as f64,
        inputs.k_u as f64,
        inputs.k_v as f64,
    )
}

/// Communication saving against per-step DDP with a low-rank optimizer:
/// `((1 + r/q)/K_x + 1/K_u + 1/K_v)⁻¹`.
pub fn reduction_vs_lowrank_ddp(inputs: &CostInputs) -> Result<f64> {
    inputs.validate()?;
    let (_, q, r, kx, ku, kv) = as_f64(inputs);
    Ok(1.0 / ((1.0 + r / q) / kx + 1.0 / ku + 1.0 / kv))
}

/// Communication saving against per-step DDP with full-rank Adam states:
/// `((1 + r/q)/K_x + r/(K_u·p) + r/(K_v·p))⁻¹`.
pub fn reduction_vs_fullrank_ddp(inputs: &CostInputs) -> Result<f64> {
    inputs.validate()?;
    let (p, q, r, kx, ku, kv) = as_f64(inputs);
    Ok(1.0 / ((1.0 + r / q) / kx + r / (ku * p) + r / (kv * p)))
}

/// Saving against local full-rank Adam: `3pq/(pq + 2rq)` for the local
/// variant, `3pq/(pq + pr + 2rq)` when the global basis is also shipped.
pub fn reduction_vs_fullrank_local(inputs: &CostInputs, strategy: ProjectionStrategy) -> Result<f64> {
    inputs.validate()?;
    let (p, q, r, ..) = as_f64(inputs);
    let denom = match strategy {
        ProjectionStrategy::Local => p * q + 2.0 * r * q,
        ProjectionStrategy::Global => p * q + p * r + 2.0 * r * q,
    };
    Ok(3.0 * p * q / denom)
}

/// Optimizer-state compression `p / r`.
pub fn state_reduction(inputs: &CostInputs) -> Result<f64> {
    inputs.validate()?;
    if inputs.r == 0 {
        return Err(CostError::InvalidInputs("r must be >= 1".into()));
    }
    Ok(inputs.p as f64 / inputs.r as f64)
}

/// Where the error-feedback residual lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfLayout {
    /// Dedicated `p × q` buffer.
    SeparateBuffer,
    /// Stored in the full-rank gradient allocation; no extra memory, but
    /// incompatible with gradient accumulation.
    InGradient,
}

/// Worker-side memory in scalars.
pub fn memory_overhead(method: Method, ef: EfLayout, uplink_buffer: bool, inputs: &CostInputs) -> Result<u64> {
    inputs.validate()?;
    let CostInputs { p, q, r, .. } = *inputs;
    let (pq, pr, rq) = (p * q, p * r, r * q);
    match method {
        Method::LocalAdam | Method::Ddp => {
            if uplink_buffer {
                return Err(CostError::InvalidCombination(
                    "full-rank Adam keeps no uplink time buffer".into(),
                ));
            }
            Ok(3 * pq)
        }
        Method::Lordo { qhm, .. } => {
            if r == 0 {
                return Err(CostError::InvalidInputs("low-rank methods need r >= 1".into()));
            }
            if uplink_buffer && qhm == QhmMode::FullRank {
                return Err(CostError::InvalidCombination(
                    "full-rank QHM pseudo-gradients cannot be accumulated in low rank".into(),
                ));
            }
            let error_buffer = match ef {
                EfLayout::SeparateBuffer => pq,
                EfLayout::InGradient => 0,
            };
            let time_buffer = if uplink_buffer { rq } else { 0 };
            // low-rank gradient + two moments + basis
            Ok(error_buffer + pr + 3 * rq + time_buffer)
        }
    }
}
