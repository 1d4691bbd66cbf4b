//! Experiment description, parsed from TOML with a strict schema.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::{HyperParams, LrSchedule, MuSemantics, QhmMode};
use crate::problems::{RegressionSpec, ShardPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(field: &'static str, message: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid {
        field,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionStrategy {
    /// One basis per layer, recomputed from the aggregated pseudo-gradient at
    /// every parameter sync and shared by all workers.
    Global,
    /// Each worker refreshes its own basis from `Ĝ + E` on the first local
    /// step of every parameter-sync window.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncSchedule {
    pub k_x: u64,
    pub k_u: u64,
    pub k_v: u64,
}

impl SyncSchedule {
    pub fn uniform(k: u64) -> Self {
        Self { k_x: k, k_u: k, k_v: k }
    }

    /// Whether the quantity with period `k` syncs after 0-based step `t`.
    pub fn fires(k: u64, t: u64) -> bool {
        (t + 1).is_multiple_of(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum QhmConfig {
    None {},
    LowRank { omega: f64 },
    FullRank { omega: f64 },
}

impl QhmConfig {
    pub fn mode(&self) -> QhmMode {
        match self {
            QhmConfig::None {} => QhmMode::NoQhm,
            QhmConfig::LowRank { .. } => QhmMode::LowRank,
            QhmConfig::FullRank { .. } => QhmMode::FullRank,
        }
    }

    pub fn omega(&self) -> f64 {
        match *self {
            QhmConfig::None {} => 1.0,
            QhmConfig::LowRank { omega } | QhmConfig::FullRank { omega } => omega,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuterOpt {
    #[default]
    Average,
    /// Nesterov momentum on the outer gradient `−Δ`.
    Nesterov { outer_lr: f64, momentum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Regression {
        rows: usize,
        p: usize,
        q: usize,
        noise_std: f64,
        #[serde(default = "one")]
        layers: usize,
        #[serde(default)]
        shard_policy: ShardPolicy,
    },
}

fn one() -> usize {
    1
}

impl ProblemConfig {
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            ProblemConfig::Regression { p, q, .. } => (p, q),
        }
    }

    pub fn regression_spec(&self, shards: usize) -> RegressionSpec {
        match *self {
            ProblemConfig::Regression {
                rows,
                p,
                q,
                noise_std,
                layers,
                shard_policy,
            } => RegressionSpec {
                rows,
                p,
                q,
                layers,
                noise_std,
                shards,
                policy: shard_policy,
            },
        }
    }
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub clip_radius: f64,
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    #[serde(default = "yes")]
    pub rotate_moments: bool,
    #[serde(default = "yes")]
    pub error_feedback: bool,
    #[serde(default = "full_keep")]
    pub sparsify_keep: f64,
    #[serde(default)]
    pub mu_semantics: MuSemantics,
}

fn yes() -> bool {
    true
}

fn full_keep() -> f64 {
    1.0
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            rotate_moments: true,
            error_feedback: true,
            sparsify_keep: 1.0,
            mu_semantics: MuSemantics::PerColumn,
        }
    }
}

/// Full description of one simulated training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub workers: usize,
    pub steps: u64,
    /// Per-worker batch size.
    pub batch_size: usize,
    pub rank: usize,
    pub projection: ProjectionStrategy,
    pub problem: ProblemConfig,
    pub schedule: SyncSchedule,
    pub qhm: QhmConfig,
    pub hyper: HyperConfig,
    #[serde(default)]
    pub outer: OuterOpt,
    #[serde(default)]
    pub flags: Flags,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            beta1: self.hyper.beta1,
            beta2: self.hyper.beta2,
            eps: self.hyper.eps,
            clip_radius: self.hyper.clip_radius,
            omega: self.qhm.omega(),
            schedule: LrSchedule {
                lr: self.hyper.lr,
                warmup_steps: self.hyper.warmup_steps,
            },
        }
    }

    /// Local projections averaged across workers before the bases are
    /// refreshed mix moments expressed in different bases.
    pub fn basis_inconsistent(&self) -> bool {
        self.projection == ProjectionStrategy::Local
            && self.workers > 1
            && (self.schedule.k_u < self.schedule.k_x || self.schedule.k_v < self.schedule.k_x)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return invalid("workers", "must be >= 1");
        }
        if self.steps == 0 {
            return invalid("steps", "must be >= 1");
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be >= 1");
        }
        let ProblemConfig::Regression {
            rows,
            p,
            q,
            noise_std,
            layers,
            shard_policy,
        } = self.problem;
        if p == 0 || q == 0 {
            return invalid("problem.p", "dimensions must be positive");
        }
        if layers == 0 {
            return invalid("problem.layers", "must be >= 1");
        }
        if rows < self.workers {
            return invalid("problem.rows", format!("{rows} rows cannot be split across {} workers", self.workers));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return invalid("problem.noise_std", format!("must be finite and >= 0, got {noise_std}"));
        }
        if shard_policy == ShardPolicy::DisjointFeatureBlocks && p < self.workers {
            return invalid("problem.shard_policy", format!("p = {p} cannot form {} feature blocks", self.workers));
        }
        if self.rank == 0 || self.rank > p.min(q) {
            return invalid("rank", format!("must lie in [1, min(p, q) = {}], got {}", p.min(q), self.rank));
        }
        let s = self.schedule;
        if s.k_x == 0 {
            return invalid("schedule.k_x", "must be >= 1");
        }
        if s.k_u == 0 {
            return invalid("schedule.k_u", "must be >= 1");
        }
        if s.k_v == 0 {
            return invalid("schedule.k_v", "must be >= 1");
        }
        match self.qhm {
            QhmConfig::None {} => {}
            QhmConfig::LowRank { omega } | QhmConfig::FullRank { omega } => {
                if !(0.0..=1.0).contains(&omega) {
                    return invalid("qhm.omega", format!("must lie in [0, 1], got {omega}"));
                }
            }
        }
        let h = self.hyper;
        if !(0.0..1.0).contains(&h.beta1) {
            return invalid("hyper.beta1", format!("must lie in [0, 1), got {}", h.beta1));
        }
        if !(0.0..1.0).contains(&h.beta2) {
            return invalid("hyper.beta2", format!("must lie in [0, 1), got {}", h.beta2));
        }
        if !(h.eps > 0.0) {
            return invalid("hyper.eps", format!("must be positive, got {}", h.eps));
        }
        if !(h.clip_radius > 0.0) {
            return invalid("hyper.clip_radius", format!("must be positive, got {}", h.clip_radius));
        }
        if !(h.lr > 0.0 && h.lr.is_finite()) {
            return invalid("hyper.lr", format!("must be positive, got {}", h.lr));
        }
        if h.warmup_steps >= self.steps {
            return invalid(
                "hyper.warmup_steps",
                format!("must be < steps = {}, got {}", self.steps, h.warmup_steps),
            );
        }
        if let OuterOpt::Nesterov { outer_lr, momentum } = self.outer {
            if !(outer_lr > 0.0) {
                return invalid("outer.outer_lr", format!("must be positive, got {outer_lr}"));
            }
            if !(0.0..1.0).contains(&momentum) {
                return invalid("outer.momentum", format!("must lie in [0, 1), got {momentum}"));
            }
        }
        let keep = self.flags.sparsify_keep;
        if !(keep > 0.0 && keep <= 1.0) {
            return invalid("flags.sparsify_keep", format!("must lie in (0, 1], got {keep}"));
        }
        Ok(())
    }

    /// Desk-scale reference run: 4 workers on a 64×64 regression, global
    /// projections with full-rank QHM.
    pub fn reference() -> Self {
        RunConfig {
            master_seed: 0,
            workers: 4,
            steps: 640,
            batch_size: 16,
            rank: 8,
            projection: ProjectionStrategy::Global,
            problem: ProblemConfig::Regression {
                rows: 4096,
                p: 64,
                q: 64,
                noise_std: 0.1,
                layers: 1,
                shard_policy: ShardPolicy::Iid,
            },
            schedule: SyncSchedule::uniform(32),
            qhm: QhmConfig::FullRank { omega: 0.95 },
            hyper: HyperConfig {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                clip_radius: 1.0,
                lr: 1e-2,
                warmup_steps: 10,
            },
            outer: OuterOpt::Average,
            flags: Flags::default(),
        }
    }
}
