//! Distributed low-rank adaptive optimization with infrequent, decoupled
//! synchronization.
//!
//! Workers train local copies of a model with a low-rank Adam variant:
//! gradients are projected onto an orthonormal basis `Q` (with an error
//! feedback buffer for what the projection drops), moments live in the
//! projected space, and an optional quasi-hyperbolic term mixes in the raw
//! gradient. Parameters and both moments synchronize on their own periods.
//! The basis is either computed once per sync from the aggregated
//! pseudo-gradient and shared ([`config::ProjectionStrategy::Global`]) or
//! refreshed by each worker from its own gradient
//! ([`config::ProjectionStrategy::Local`]).
//!
//! Modules:
//! - [`linalg`]: dense matrices and a deterministic Jacobi SVD
//! - [`projection`]: bases, moment rotation, subspace diagnostics
//! - [`optimizer`]: the per-tensor update kernel and a full-rank Adam reference
//! - [`problems`]: sharded matrix regression and a power-law gradient oracle
//! - [`costs`]: communication and memory accounting
//! - [`config`]: run configuration
//! - [`distsim`]: the multi-worker training loop

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod costs;
pub mod distsim;
pub mod linalg;
pub mod optimizer;
pub mod problems;
pub mod projection;

pub use config::{ProjectionStrategy, RunConfig, SyncSchedule};
pub use distsim::{run_experiment, Execution, Simulator, StepRecord};
pub use linalg::Matrix;
pub use optimizer::QhmMode;
