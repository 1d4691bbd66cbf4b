//! Multi-worker training loop with decoupled synchronization.
//!
//! Every step, each worker draws a batch from its own shard, clips the
//! gradient, compresses it through its projection with error feedback and
//! takes a low-rank Adam/QHM step. After the local step the first and second
//! moments are averaged on their own periods, and on parameter-sync steps the
//! pseudo-gradients `x̄ᵐ − anchor` are aggregated and handed to the outer
//! optimizer. The global strategy then recomputes one basis per layer from
//! the aggregate and rotates every worker's moments into it; the local
//! strategy lets each worker refresh its own basis on the first step of the
//! next window.
//!
//! Sync periods fire after 0-based step `t` when `(t + 1) % K == 0`. Local
//! refreshes happen on steps with `t % K_x == 0`, i.e. the first local step
//! of each window (including step 0).

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, OuterOpt, ProjectionStrategy, RunConfig, SyncSchedule};
use crate::costs::{self, CostError, CostInputs, Method, PayloadBreakdown};
use crate::linalg::{self, LinalgError, Matrix};
use crate::optimizer::{self, HyperParams, LowRankOptState, MuSemantics, OptimError, QhmMode};
use crate::problems::{ProblemError, ShardedRegression};
use crate::projection::{
    self, ComputedProjection, Projection, ProjectionError, ProjectionSource, SubspaceMetrics,
};

/// Relative singular-value threshold used for the logged numerical rank.
pub const RANK_REL_TOL: f64 = 1e-10;

const ELEMENT_SIZE: u64 = 8;
const PROJECTION_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("consistency violation: {0}")]
    Consistency(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// How worker-local steps are scheduled between barriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Serial,
    Parallel { threads: usize },
}

/// Per-worker generator, derived only from `(master_seed, worker)`.
pub fn worker_rng(master_seed: u64, worker: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(worker as u64 + 1);
    rng
}

/// Generator for problem construction.
pub fn problem_rng(master_seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(master_seed)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncFlags {
    pub params: bool,
    pub first_moment: bool,
    pub second_moment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    /// `None` for the shared global basis.
    pub worker: Option<usize>,
    #[serde(flatten)]
    pub metrics: SubspaceMetrics,
}

/// One logged row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Held-out batch loss of each worker after its local step.
    #[serde(with = "nan_as_null::vec")]
    pub worker_losses: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub mean_loss: f64,
    /// Full-data loss of the averaged model at the end of the step.
    #[serde(with = "nan_as_null")]
    pub global_loss: f64,
    pub synced: SyncFlags,
    pub bytes_uplink: u64,
    pub bytes_downlink: u64,
    pub projection_updates: Vec<LayerMetrics>,
    /// Numerical rank of each layer's aggregated pseudo-gradient; empty on
    /// steps without a parameter sync.
    pub delta_ranks: Vec<usize>,
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Serde helpers mapping NaN/Inf to `null` and back to NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(xs.len()))?;
            for x in xs {
                seq.serialize_element(&x.is_finite().then_some(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let raw = Vec::<Option<f64>>::deserialize(d)?;
            Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}

/// Keeps the `⌈keep·n⌉` largest-magnitude entries; ties go to the lowest
/// linear index.
pub fn sparsify_topk(delta: &Matrix, keep_fraction: f64) -> Matrix {
    let n = delta.as_slice().len();
    let keep = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    if keep == n {
        return delta.clone();
    }
    let vals = delta.as_slice();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        vals[b]
            .abs()
            .partial_cmp(&vals[a].abs())
            .expect("finite pseudo-gradient")
            .then(a.cmp(&b))
    });
    let mut out = Matrix::zeros(delta.rows(), delta.cols());
    for &i in &idx[..keep] {
        out.as_mut_slice()[i] = vals[i];
    }
    out
}

/// Entrywise mean, accumulated in input order.
pub fn mean_of(mats: &[&Matrix]) -> Result<Matrix> {
    let first = mats
        .first()
        .ok_or_else(|| SimError::Consistency("mean over zero matrices".into()))?;
    let mut acc = (*first).clone();
    for m in &mats[1..] {
        acc.axpy(1.0, m)?;
    }
    Ok(acc.scale(1.0 / mats.len() as f64))
}

/// Server-side rule applied to the aggregated pseudo-gradient.
#[derive(Debug, Clone)]
pub struct OuterOptimizer {
    rule: OuterOpt,
    velocity: Option<Matrix>,
}

impl OuterOptimizer {
    pub fn new(rule: OuterOpt) -> Self {
        Self { rule, velocity: None }
    }

    /// New global model from the anchor and aggregated `Δ = mean(x̄ᵐ) − anchor`.
    ///
    /// Nesterov treats `g = −Δ` as the outer gradient:
    /// `w ← μ·w + g`, `x ← anchor − lr·(g + μ·w)`.
    pub fn step(&mut self, anchor: &Matrix, delta: &Matrix) -> Result<Matrix> {
        match self.rule {
            OuterOpt::Average => Ok(anchor.add(delta)?),
            OuterOpt::Nesterov { outer_lr, momentum } => {
                let grad = delta.scale(-1.0);
                let mut w = match self.velocity.take() {
                    Some(w) => w.scale(momentum),
                    None => Matrix::zeros(delta.rows(), delta.cols()),
                };
                w.axpy(1.0, &grad)?;
                let mut dir = grad;
                dir.axpy(momentum, &w)?;
                self.velocity = Some(w);
                let mut x = anchor.clone();
                x.axpy(-outer_lr, &dir)?;
                Ok(x)
            }
        }
    }
}

/// Moves a state's moments into `new`'s basis and installs it.
///
/// With `rotate == false` the moments are kept verbatim, which is the
/// ablation where momenta are not realigned.
pub fn rebase_state(
    state: &mut LowRankOptState,
    new: Projection,
    rotate: bool,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    if rotate && state.step > 0 {
        let rot = projection::rotation_matrix(&new, &state.proj)?;
        let v = projection::rotate_second_moment(&rot, &state.u, &state.v, beta1, beta2, state.step)?;
        let u = projection::rotate_first_moment(&rot, &state.u)?;
        state.u = u;
        state.v = v;
    }
    state.proj = new;
    Ok(())
}

/// Recomputes a worker's basis from its own `Ĝ + E`. A degenerate signal
/// keeps the stale basis and returns `None`.
pub fn local_projection_refresh(
    state: &mut LowRankOptState,
    clipped_grad: &Matrix,
    use_error: bool,
    step: u64,
    rotate: bool,
    hp: &HyperParams,
) -> Result<Option<SubspaceMetrics>> {
    let signal = if use_error {
        clipped_grad.add(&state.error)?
    } else {
        clipped_grad.clone()
    };
    let computed = match projection::compute_projection(
        &signal,
        state.proj.rank(),
        step,
        ProjectionSource::LocalGradientWithEf,
    ) {
        Ok(c) => c,
        Err(ProjectionError::Degenerate { .. }) => {
            log::warn!("degenerate local projection signal at step {step}; keeping stale basis");
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    let metrics = SubspaceMetrics::for_update(&computed, &state.proj)?;
    rebase_state(state, computed.projection, rotate, hp.beta1, hp.beta2)?;
    Ok(Some(metrics))
}

struct Worker {
    id: usize,
    params: Vec<Matrix>,
    states: Vec<LowRankOptState>,
    rng: ChaCha12Rng,
}

struct LocalOutcome {
    loss: f64,
    refreshes: Vec<(usize, SubspaceMetrics)>,
}

/// Immutable per-run settings shared by all workers.
struct StepContext<'a> {
    problem: &'a ShardedRegression,
    hp: HyperParams,
    mode: QhmMode,
    mu: MuSemantics,
    strategy: ProjectionStrategy,
    k_x: u64,
    batch: usize,
    error_feedback: bool,
    rotate: bool,
    refresh_enabled: bool,
}

impl Worker {
    fn local_step(&mut self, ctx: &StepContext<'_>, t: u64, lr: f64) -> Result<LocalOutcome> {
        let batch = ctx.problem.sample_batch(self.id, ctx.batch, &mut self.rng)?;
        let grads = ctx.problem.stoch_gradient(&self.params, &batch)?;
        let refresh = ctx.strategy == ProjectionStrategy::Local && ctx.refresh_enabled && t.is_multiple_of(ctx.k_x);
        let mut refreshes = Vec::new();
        for (l, grad) in grads.iter().enumerate() {
            if !grad.is_finite() {
                return Err(SimError::NonFinite(format!("gradient of layer {l} on worker {}", self.id)));
            }
            let clipped = linalg::clip_frobenius(grad, ctx.hp.clip_radius)?;
            let state = &mut self.states[l];
            if refresh {
                if let Some(m) = local_projection_refresh(state, &clipped, ctx.error_feedback, t, ctx.rotate, &ctx.hp)? {
                    refreshes.push((l, m));
                }
            }
            let g = if ctx.error_feedback {
                let (g, residual) = optimizer::compress_gradient(&clipped, state)?;
                state.error = residual;
                g
            } else {
                state.proj.down(&clipped)?
            };
            optimizer::update_moments(state, &g, ctx.hp.beta1, ctx.hp.beta2)?;
            let dir = optimizer::compute_update(state, &clipped, &g, ctx.mode, &ctx.hp, ctx.mu)?;
            self.params[l].axpy(-lr, &dir)?;
        }
        let eval = ctx.problem.sample_batch(self.id, ctx.batch, &mut self.rng)?;
        let loss = ctx.problem.loss(&self.params, &eval)?;
        Ok(LocalOutcome { loss, refreshes })
    }
}

/// Stateful simulator; yields one [`StepRecord`] per step.
pub struct Simulator {
    config: RunConfig,
    problem: ShardedRegression,
    hp: HyperParams,
    workers: Vec<Worker>,
    anchor: Vec<Matrix>,
    outer: Vec<OuterOptimizer>,
    global_proj: Vec<Projection>,
    payload: (PayloadBreakdown, PayloadBreakdown),
    refresh_enabled: bool,
    pool: Option<rayon::ThreadPool>,
    t: u64,
    finished: bool,
}

impl Simulator {
    pub fn new(config: RunConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let problem = ShardedRegression::generate(
            &config.problem.regression_spec(config.workers),
            &mut problem_rng(config.master_seed),
        )?;
        let (p, q) = config.problem.dims();
        let r = config.rank;
        let layers = problem.num_layers();

        // A rank-p basis spans everything; keep it fixed at the identity.
        let refresh_enabled = r < p;
        let initial: Vec<Projection> = match config.projection {
            ProjectionStrategy::Global if refresh_enabled => {
                let mut rng = ChaCha12Rng::seed_from_u64(config.master_seed);
                rng.set_stream(PROJECTION_STREAM);
                (0..layers).map(|_| Projection::random(p, r, &mut rng)).collect()
            }
            _ => (0..layers).map(|_| Projection::identity(p, r)).collect(),
        };

        let zero_params: Vec<Matrix> = (0..layers).map(|_| Matrix::zeros(p, q)).collect();
        let workers = (0..config.workers)
            .map(|id| Worker {
                id,
                params: zero_params.clone(),
                states: initial.iter().map(|pr| LowRankOptState::new(pr.clone(), q)).collect(),
                rng: worker_rng(config.master_seed, id),
            })
            .collect();

        let method = Method::Lordo {
            strategy: config.projection,
            qhm: config.qhm.mode(),
        };
        let inputs = CostInputs {
            p: p as u64,
            q: q as u64,
            r: r as u64,
            k_x: config.schedule.k_x,
            k_u: config.schedule.k_u,
            k_v: config.schedule.k_v,
            workers: config.workers as u64,
            element_size: ELEMENT_SIZE,
        };
        let per_layer = costs::per_payload(method, &inputs)?;

        let pool = match exec {
            Execution::Serial => None,
            Execution::Parallel { threads } => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads.max(1))
                    .build()
                    .map_err(|e| SimError::ThreadPool(e.to_string()))?,
            ),
        };

        if config.basis_inconsistent() {
            log::warn!("local projections with moment periods shorter than k_x average moments across different bases");
        }

        Ok(Self {
            hp: config.hyper_params(),
            outer: (0..layers).map(|_| OuterOptimizer::new(config.outer)).collect(),
            problem,
            workers,
            anchor: zero_params,
            global_proj: initial,
            payload: (per_layer.uplink, per_layer.downlink),
            refresh_enabled,
            pool,
            config,
            t: 0,
            finished: false,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn problem(&self) -> &ShardedRegression {
        &self.problem
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn worker_params(&self, worker: usize) -> &[Matrix] {
        &self.workers[worker].params
    }

    pub fn worker_state(&self, worker: usize, layer: usize) -> &LowRankOptState {
        &self.workers[worker].states[layer]
    }

    /// Shared basis for a layer; meaningful for the global strategy.
    pub fn global_projection(&self, layer: usize) -> &Projection {
        &self.global_proj[layer]
    }

    /// Parameters of the last agreed global model.
    pub fn anchor(&self) -> &[Matrix] {
        &self.anchor
    }

    /// Advances one step. Returns `None` once all steps ran or after a
    /// divergence record.
    pub fn next_record(&mut self) -> Result<Option<StepRecord>> {
        if self.finished || self.t >= self.config.steps {
            return Ok(None);
        }
        let started = Instant::now();
        let t = self.t;
        let lr = self.hp.schedule.at(t);
        let ctx = StepContext {
            problem: &self.problem,
            hp: self.hp,
            mode: self.config.qhm.mode(),
            mu: self.config.flags.mu_semantics,
            strategy: self.config.projection,
            k_x: self.config.schedule.k_x,
            batch: self.config.batch_size,
            error_feedback: self.config.flags.error_feedback,
            rotate: self.config.flags.rotate_moments,
            refresh_enabled: self.refresh_enabled,
        };

        let outcomes: Vec<Result<LocalOutcome>> = match &self.pool {
            None => self.workers.iter_mut().map(|w| w.local_step(&ctx, t, lr)).collect(),
            Some(pool) => {
                let workers = &mut self.workers;
                pool.install(|| workers.par_iter_mut().map(|w| w.local_step(&ctx, t, lr)).collect())
            }
        };

        let mut losses = Vec::with_capacity(outcomes.len());
        let mut updates = Vec::new();
        let mut failure = None;
        for (m, out) in outcomes.into_iter().enumerate() {
            match out {
                Ok(o) => {
                    losses.push(o.loss);
                    updates.extend(o.refreshes.into_iter().map(|(layer, metrics)| LayerMetrics {
                        layer,
                        worker: Some(m),
                        metrics,
                    }));
                }
                Err(SimError::NonFinite(msg)) => {
                    losses.push(f64::NAN);
                    failure.get_or_insert(msg);
                }
                Err(e) => return Err(e),
            }
        }
        if failure.is_none() {
            failure = self.find_non_finite(&losses);
        }
        if let Some(msg) = failure {
            self.finished = true;
            let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            return Ok(Some(StepRecord {
                step: t,
                lr,
                worker_losses: losses,
                mean_loss,
                global_loss: f64::NAN,
                synced: SyncFlags::default(),
                bytes_uplink: 0,
                bytes_downlink: 0,
                projection_updates: updates,
                delta_ranks: Vec::new(),
                diverged: true,
                note: Some(format!("diverged at step {t}: {msg}")),
                wall_clock: started.elapsed(),
            }));
        }

        let sched = self.config.schedule;
        let synced = SyncFlags {
            params: SyncSchedule::fires(sched.k_x, t),
            first_moment: SyncSchedule::fires(sched.k_u, t),
            second_moment: SyncSchedule::fires(sched.k_v, t),
        };
        if synced.first_moment {
            self.sync_moment(|s| &mut s.u)?;
        }
        if synced.second_moment {
            self.sync_moment(|s| &mut s.v)?;
        }
        let mut delta_ranks = Vec::new();
        if synced.params {
            let (ranks, metrics) = self.sync_params(t)?;
            delta_ranks = ranks;
            updates.extend(metrics);
        }

        let layers = self.problem.num_layers() as u64;
        let bytes = |b: &PayloadBreakdown| {
            b.on_step(synced.params, synced.first_moment, synced.second_moment) * layers * ELEMENT_SIZE
        };
        let global_loss = self.problem.full_loss(&self.mean_params()?)?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        self.t += 1;
        Ok(Some(StepRecord {
            step: t,
            lr,
            worker_losses: losses,
            mean_loss,
            global_loss,
            synced,
            bytes_uplink: bytes(&self.payload.0),
            bytes_downlink: bytes(&self.payload.1),
            projection_updates: updates,
            delta_ranks,
            diverged: false,
            note: None,
            wall_clock: started.elapsed(),
        }))
    }

    fn find_non_finite(&self, losses: &[f64]) -> Option<String> {
        for (m, w) in self.workers.iter().enumerate() {
            if !losses[m].is_finite() {
                return Some(format!("loss of worker {m} is {}", losses[m]));
            }
            if let Some(l) = w.params.iter().position(|x| !x.is_finite()) {
                return Some(format!("parameters of layer {l} on worker {m}"));
            }
        }
        None
    }

    fn mean_params(&self) -> Result<Vec<Matrix>> {
        (0..self.anchor.len())
            .map(|l| {
                let mats: Vec<&Matrix> = self.workers.iter().map(|w| &w.params[l]).collect();
                mean_of(&mats)
            })
            .collect()
    }

    /// Replaces the selected moment on every worker by the cross-worker mean.
    fn sync_moment(&mut self, select: impl Fn(&mut LowRankOptState) -> &mut Matrix) -> Result<()> {
        for l in 0..self.anchor.len() {
            let mean = {
                let mut copies = Vec::with_capacity(self.workers.len());
                for w in self.workers.iter_mut() {
                    copies.push(select(&mut w.states[l]).clone());
                }
                let refs: Vec<&Matrix> = copies.iter().collect();
                mean_of(&refs)?
            };
            for w in self.workers.iter_mut() {
                *select(&mut w.states[l]) = mean.clone();
            }
        }
        Ok(())
    }

    /// Aggregates pseudo-gradients, applies the outer optimizer and, for the
    /// global strategy, recomputes and broadcasts the shared basis.
    fn sync_params(&mut self, t: u64) -> Result<(Vec<usize>, Vec<LayerMetrics>)> {
        let keep = self.config.flags.sparsify_keep;
        let mut ranks = Vec::with_capacity(self.anchor.len());
        let mut metrics = Vec::new();
        for l in 0..self.anchor.len() {
            let mut deltas = Vec::with_capacity(self.workers.len());
            for w in &self.workers {
                let d = w.params[l].sub(&self.anchor[l])?;
                deltas.push(if keep < 1.0 { sparsify_topk(&d, keep) } else { d });
            }
            let refs: Vec<&Matrix> = deltas.iter().collect();
            let delta = mean_of(&refs)?;
            let svd = linalg::svd(&delta)?;
            ranks.push(linalg::rank_from_singular_values(&svd.s, RANK_REL_TOL));

            let new_model = self.outer[l].step(&self.anchor[l], &delta)?;
            for w in self.workers.iter_mut() {
                w.params[l] = new_model.clone();
            }
            self.anchor[l] = new_model;

            if self.config.projection == ProjectionStrategy::Global && self.refresh_enabled {
                if let Some(m) = self.refresh_global(l, &delta, t + 1)? {
                    metrics.push(LayerMetrics {
                        layer: l,
                        worker: None,
                        metrics: m,
                    });
                }
            }
        }
        Ok((ranks, metrics))
    }

    fn refresh_global(&mut self, layer: usize, delta: &Matrix, step: u64) -> Result<Option<SubspaceMetrics>> {
        let computed: ComputedProjection = match projection::compute_projection(
            delta,
            self.config.rank,
            step,
            ProjectionSource::AggregatedPseudoGradient,
        ) {
            Ok(c) => c,
            Err(ProjectionError::Degenerate { .. }) => {
                log::warn!("degenerate pseudo-gradient for layer {layer} at step {step}; keeping previous basis");
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let metrics = SubspaceMetrics::for_update(&computed, &self.global_proj[layer])?;
        let rotate = self.config.flags.rotate_moments;
        for w in self.workers.iter_mut() {
            if w.states[layer].proj != self.global_proj[layer] {
                return Err(SimError::Consistency(format!(
                    "worker {} diverged from the shared basis of layer {layer}",
                    w.id
                )));
            }
            rebase_state(&mut w.states[layer], computed.projection.clone(), rotate, self.hp.beta1, self.hp.beta2)?;
        }
        self.global_proj[layer] = computed.projection;
        Ok(Some(metrics))
    }
}

impl Iterator for Simulator {
    type Item = Result<StepRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => None,
            Err(e) => {
                self.finished = true;
                Some(Err(e))
            }
        }
    }
}

/// Runs a configuration to completion (or divergence).
pub fn run_experiment(config: RunConfig, exec: Execution) -> Result<Vec<StepRecord>> {
    Simulator::new(config, exec)?.collect()
}
