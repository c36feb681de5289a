use std::sync::Arc;

use multiarm::birrt::{expert_for_task, ExpertParams, ExpertRecord};
use multiarm::env::EnvConfig;
use multiarm::eval::{difficulty_bucket, eval_env_config, evaluate, evaluate_checkpoint, speed_bucket};
use multiarm::kinematics::ArmModel;
use multiarm::neural::{Checkpoint, NetShape};
use multiarm::sac::SacConfig;
use multiarm::taskgen::{generate_dataset, TaskDataset, TaskGenParams, TaskMode};
use multiarm::trainer::{read_metrics, run_training, TrainConfig};

fn ur5() -> Arc<ArmModel> {
    Arc::new(ArmModel::ur5())
}

fn tiny_config(use_expert: bool, steps: usize) -> TrainConfig {
    TrainConfig {
        sac: SacConfig {
            batch_size: 16,
            warmup_steps: 32,
            replay_capacity: 2_000,
            policy_shape: NetShape::policy(8, &[16]),
            q_shape: NetShape::q(8, &[16]),
            ..SacConfig::default()
        },
        env: EnvConfig { max_steps: 30, ..EnvConfig::default() },
        use_expert,
        total_env_steps: steps,
        max_level: 1,
        workers: 1,
        checkpoint_every: 10,
        seed: 5,
    }
}

fn tasks_and_experts(arm: &Arc<ArmModel>) -> (TaskDataset, Vec<ExpertRecord>) {
    let ds = generate_dataset(arm, 21, 12, (1, 2), TaskMode::Static, &TaskGenParams::default(), 1).unwrap();
    let params = ExpertParams { max_steps: 30, ..ExpertParams::default() };
    let experts = ds.tasks.iter().map(|t| expert_for_task(t, arm, 2, &params).unwrap()).collect();
    (ds, experts)
}

#[test]
fn single_worker_training_is_byte_reproducible() {
    let arm = ur5();
    let (ds, experts) = tasks_and_experts(&arm);
    let cfg = tiny_config(true, 400);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<_> = dirs.iter().map(|d| run_training(&ds.tasks, &experts, &arm, &cfg, Some(d.path())).unwrap()).collect();
    for name in ["metrics.csv", "checkpoint.json", "checkpoint_00000010.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
    assert_eq!(read_metrics(&dirs[0].path().join("metrics.csv")).unwrap(), outs[0].metrics);
    assert!(outs[0].env_steps >= 400);
    assert_eq!(outs[0].metrics.last().unwrap().env_steps, outs[0].env_steps);

    let other = run_training(&ds.tasks, &experts, &arm, &TrainConfig { seed: 6, ..cfg.clone() }, None).unwrap();
    assert_ne!(other.metrics, outs[0].metrics);
}

#[test]
fn experts_are_injected_only_after_failures() {
    let arm = ur5();
    let (ds, experts) = tasks_and_experts(&arm);
    let out = run_training(&ds.tasks, &experts, &arm, &tiny_config(true, 600), None).unwrap();
    let mut prev = 0;
    let mut injected = 0;
    for row in &out.metrics {
        assert!(!(row.injected && row.success));
        assert_eq!(row.expert_injections, prev + usize::from(row.injected));
        prev = row.expert_injections;
        injected += usize::from(row.injected);
    }
    assert!(injected > 0);

    let none = run_training(&ds.tasks, &[], &arm, &tiny_config(false, 300), None).unwrap();
    assert!(none.metrics.iter().all(|r| !r.injected && r.expert_injections == 0));
    assert!(run_training(&ds.tasks, &[], &arm, &tiny_config(true, 300), None).is_err());
}

#[test]
fn checkpoints_reload_into_identical_policies() {
    let arm = ur5();
    let (ds, experts) = tasks_and_experts(&arm);
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&ds.tasks, &experts, &arm, &tiny_config(true, 200), Some(dir.path())).unwrap();
    let c = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(c, out.state.checkpoint());
    assert_eq!(c.policy().params, out.state.policy.params);
}

#[test]
fn evaluation_is_deterministic_and_buckets_agree_with_an_independent_oracle() {
    let arm = ur5();
    let (ds, experts) = tasks_and_experts(&arm);
    let dir = tempfile::tempdir().unwrap();
    run_training(&ds.tasks, &experts, &arm, &tiny_config(true, 200), Some(dir.path())).unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let env = eval_env_config(EnvConfig::default());

    let dynamic = generate_dataset(&arm, 4, 30, (1, 3), TaskMode::Dynamic, &TaskGenParams::default(), 1).unwrap();
    let static_ = generate_dataset(&arm, 4, 30, (1, 3), TaskMode::Static, &TaskGenParams::default(), 1).unwrap();
    for (data, mode) in [(&static_, TaskMode::Static), (&dynamic, TaskMode::Dynamic)] {
        let a = evaluate_checkpoint(&ckpt, data, mode, &arm, env, 1).unwrap();
        let b = evaluate_checkpoint(&ckpt, data, mode, &arm, env, 3).unwrap();
        assert_eq!(a, b);
        let out = tempfile::tempdir().unwrap();
        let (j1, c1) = a.write(out.path(), "one").unwrap();
        let (j2, c2) = b.write(out.path(), "two").unwrap();
        assert_eq!(std::fs::read(j1).unwrap(), std::fs::read(j2).unwrap());
        assert_eq!(std::fs::read(c1).unwrap(), std::fs::read(c2).unwrap());

        for (r, t) in a.tasks.iter().zip(&data.tasks) {
            let expect = match mode {
                TaskMode::Static => match t.difficulty {
                    d if d < 0.35 => "0.00-0.35",
                    d if d < 0.45 => "0.35-0.45",
                    _ => "0.45-0.50",
                },
                TaskMode::Dynamic => match t.speed.unwrap() {
                    s if s < 0.05 => "slow",
                    s if s < 0.10 => "medium",
                    _ => "fast",
                },
            };
            assert_eq!(r.bucket, expect);
            assert_eq!(r.id, t.id);
        }
        let total: usize = a.buckets.iter().map(|b| b.tasks).sum();
        assert_eq!(total, data.tasks.len());
        for b in &a.buckets {
            let m: Vec<_> = a.tasks.iter().filter(|t| t.k == b.k && t.bucket == b.bucket).collect();
            assert_eq!(b.tasks, m.len());
            assert_eq!(b.successes, m.iter().filter(|t| t.success).count());
        }
    }
    assert_eq!(difficulty_bucket(0.35), "0.35-0.45");
    assert_eq!(speed_bucket(0.05), "medium");

    let policy = Checkpoint::load(&ckpt).unwrap().policy();
    assert!(evaluate(&policy, &static_, TaskMode::Dynamic, &arm, env, 1).is_err());
}
