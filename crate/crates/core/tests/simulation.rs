use lordo::config::{ConfigError, OuterOpt, ProblemConfig, QhmConfig};
use lordo::costs::{self, CostInputs, Method};
use lordo::distsim::{run_experiment, Execution, Simulator};
use lordo::problems::ShardPolicy;
use lordo::{ProjectionStrategy, RunConfig, SyncSchedule};

fn small(strategy: ProjectionStrategy) -> RunConfig {
    let mut cfg = RunConfig::reference();
    cfg.workers = 3;
    cfg.steps = 48;
    cfg.batch_size = 8;
    cfg.rank = 3;
    cfg.projection = strategy;
    cfg.schedule = SyncSchedule::uniform(8);
    cfg.problem = ProblemConfig::Regression {
        rows: 300,
        p: 10,
        q: 7,
        noise_std: 0.1,
        layers: 2,
        shard_policy: ShardPolicy::Iid,
    };
    cfg.hyper.lr = 0.05;
    cfg.hyper.warmup_steps = 4;
    cfg
}

#[test]
fn workers_agree_after_parameter_sync() {
    let mut sim = Simulator::new(small(ProjectionStrategy::Local), Execution::Serial).unwrap();
    while let Some(rec) = sim.next_record().unwrap() {
        if rec.synced.params {
            for m in 1..3 {
                assert_eq!(sim.worker_params(m), sim.worker_params(0));
            }
            assert_eq!(sim.anchor(), sim.worker_params(0));
        }
        if rec.synced.first_moment {
            for l in 0..2 {
                assert_eq!(sim.worker_state(1, l).u, sim.worker_state(0, l).u);
            }
        }
    }
}

#[test]
fn global_workers_share_the_basis() {
    let mut sim = Simulator::new(small(ProjectionStrategy::Global), Execution::Serial).unwrap();
    while sim.next_record().unwrap().is_some() {
        for l in 0..2 {
            for m in 0..3 {
                assert_eq!(&sim.worker_state(m, l).proj, sim.global_projection(l));
            }
        }
    }
}

#[test]
fn training_reduces_loss() {
    for strategy in [ProjectionStrategy::Global, ProjectionStrategy::Local] {
        let records = run_experiment(small(strategy), Execution::Serial).unwrap();
        assert_eq!(records.len(), 48);
        let first = records[0].global_loss;
        let last = records.last().unwrap().global_loss;
        assert!(last < first, "{strategy:?}: {first} -> {last}");
    }
}

#[test]
fn warmup_schedule_is_logged() {
    let records = run_experiment(small(ProjectionStrategy::Global), Execution::Serial).unwrap();
    let lrs: Vec<f64> = records.iter().take(6).map(|r| r.lr).collect();
    let expected = [0.0125, 0.025, 0.0375, 0.05, 0.05, 0.05];
    for (got, want) in lrs.iter().zip(expected) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn byte_totals_follow_payload_table() {
    let mut cfg = small(ProjectionStrategy::Global);
    cfg.schedule = SyncSchedule { k_x: 6, k_u: 4, k_v: 12 };
    let records = run_experiment(cfg.clone(), Execution::Serial).unwrap();
    let inputs = CostInputs {
        k_x: 6,
        k_u: 4,
        k_v: 12,
        ..CostInputs::new(10, 7, 3, 1)
    };
    let method = Method::Lordo {
        strategy: ProjectionStrategy::Global,
        qhm: cfg.qhm.mode(),
    };
    let (up, down) = costs::analytic_totals(method, &inputs, cfg.steps).unwrap();
    let sim_up: u64 = records.iter().map(|r| r.bytes_uplink).sum();
    let sim_down: u64 = records.iter().map(|r| r.bytes_downlink).sum();
    assert_eq!(sim_up, up * 2 * 8);
    assert_eq!(sim_down, down * 2 * 8);
}

#[test]
fn divergence_ends_the_run_with_a_flagged_record() {
    let mut cfg = small(ProjectionStrategy::Global);
    cfg.hyper.lr = 1e200;
    cfg.hyper.warmup_steps = 0;
    cfg.hyper.clip_radius = 1e300;
    let records = run_experiment(cfg.clone(), Execution::Serial).unwrap();
    let last = records.last().unwrap();
    assert!(last.diverged);
    assert!(records.len() < cfg.steps as usize);
    assert!(records[..records.len() - 1].iter().all(|r| !r.diverged));
    assert!(last.note.as_deref().unwrap().contains("diverged"));
}

#[test]
fn sparsified_sync_still_trains() {
    let mut cfg = small(ProjectionStrategy::Global);
    cfg.flags.sparsify_keep = 0.25;
    let sparse = run_experiment(cfg.clone(), Execution::Serial).unwrap();
    cfg.flags.sparsify_keep = 1.0;
    let dense = run_experiment(cfg, Execution::Serial).unwrap();
    assert_ne!(sparse.last().unwrap().global_loss, dense.last().unwrap().global_loss);
    assert!(sparse.last().unwrap().global_loss < sparse[0].global_loss);
}

#[test]
fn nesterov_outer_step_changes_trajectory_deterministically() {
    let mut cfg = small(ProjectionStrategy::Local);
    cfg.outer = OuterOpt::Nesterov { outer_lr: 0.8, momentum: 0.6 };
    let a = run_experiment(cfg.clone(), Execution::Serial).unwrap();
    let b = run_experiment(cfg.clone(), Execution::Parallel { threads: 3 }).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    cfg.outer = OuterOpt::Average;
    let c = run_experiment(cfg, Execution::Serial).unwrap();
    assert_ne!(a.last().unwrap().global_loss, c.last().unwrap().global_loss);
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut cfg = small(ProjectionStrategy::Global);
    cfg.rank = 11;
    let err = Simulator::new(cfg, Execution::Serial).err().unwrap();
    assert!(err.to_string().contains("rank"), "{err}");

    let mut cfg = small(ProjectionStrategy::Global);
    cfg.qhm = QhmConfig::FullRank { omega: 1.5 };
    assert!(Simulator::new(cfg, Execution::Serial).is_err());

    let mut cfg = small(ProjectionStrategy::Global);
    cfg.hyper.warmup_steps = cfg.steps;
    assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { .. })));
}

#[test]
fn single_worker_full_rank_never_refreshes() {
    let mut cfg = small(ProjectionStrategy::Local);
    cfg.workers = 1;
    cfg.rank = 7;
    cfg.problem = ProblemConfig::Regression {
        rows: 100,
        p: 7,
        q: 9,
        noise_std: 0.0,
        layers: 1,
        shard_policy: ShardPolicy::Iid,
    };
    let records = run_experiment(cfg, Execution::Serial).unwrap();
    assert!(records.iter().all(|r| r.projection_updates.is_empty()));
}
