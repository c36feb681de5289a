//! Success-rate evaluation with difficulty and speed buckets, the runtime
//! benchmark and the ablation table.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::birrt::{decimate_in_world, plan, timed_plan, to_actions, PlannerParams};
use crate::env::{collect_episode, EnvConfig, MultiArmEnv, ScriptedActions};
use crate::error::{Error, Result};
use crate::kinematics::ArmModel;
use crate::neural::{policy_forward, Checkpoint, Network};
use crate::seed::child_seed;
use crate::taskgen::{DynamicTargets, Task, TaskDataset, TaskMode};
use crate::trainer::{Ablation, PolicyActor};

pub const EVAL_POSITION_TOLERANCE: f64 = 0.02;
pub const EVAL_ORIENTATION_TOLERANCE: f64 = 0.1;
pub const EVAL_MAX_STEPS: usize = 500;

pub const DIFFICULTY_BUCKETS: [(&str, f64, f64); 3] =
    [("0.00-0.35", 0.0, 0.35), ("0.35-0.45", 0.35, 0.45), ("0.45-0.50", 0.45, 0.50)];
/// Target speed buckets in m/s.
pub const SPEED_BUCKETS: [(&str, f64, f64); 3] = [("slow", 0.01, 0.05), ("medium", 0.05, 0.10), ("fast", 0.10, 0.15)];

/// Evaluation environment: fixed tolerances and the 500-step limit.
pub fn eval_env_config(base: EnvConfig) -> EnvConfig {
    EnvConfig { max_steps: EVAL_MAX_STEPS, ..base.with_tolerances(EVAL_POSITION_TOLERANCE, EVAL_ORIENTATION_TOLERANCE) }
}

fn bucket_of(table: &[(&'static str, f64, f64); 3], v: f64) -> &'static str {
    // Values past the last upper edge fall into the last bucket, below the
    // first lower edge into the first.
    table.iter().find(|(_, _, hi)| v < *hi).map_or(table[2].0, |b| b.0)
}

pub fn difficulty_bucket(difficulty: f64) -> &'static str {
    bucket_of(&DIFFICULTY_BUCKETS, difficulty)
}

pub fn speed_bucket(speed: f64) -> &'static str {
    bucket_of(&SPEED_BUCKETS, speed)
}

pub fn task_bucket(task: &Task) -> &'static str {
    match task.mode {
        TaskMode::Static => difficulty_bucket(task.difficulty),
        TaskMode::Dynamic => speed_bucket(task.speed.unwrap_or(0.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: u64,
    pub k: usize,
    pub bucket: String,
    pub success: bool,
    pub collided: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub k: usize,
    pub bucket: String,
    pub tasks: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps_to_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: TaskMode,
    pub success_rate: f64,
    pub buckets: Vec<BucketStats>,
    pub tasks: Vec<TaskResult>,
}

impl EvalReport {
    fn from_results(mode: TaskMode, tasks: Vec<TaskResult>) -> Self {
        let labels: Vec<&str> = match mode {
            TaskMode::Static => DIFFICULTY_BUCKETS.iter().map(|b| b.0).collect(),
            TaskMode::Dynamic => SPEED_BUCKETS.iter().map(|b| b.0).collect(),
        };
        let mut ks: Vec<usize> = tasks.iter().map(|t| t.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut buckets = Vec::new();
        for &k in &ks {
            for &label in &labels {
                let members: Vec<&TaskResult> = tasks.iter().filter(|t| t.k == k && t.bucket == label).collect();
                if members.is_empty() {
                    continue;
                }
                let wins: Vec<usize> = members.iter().filter(|t| t.success).map(|t| t.steps).collect();
                buckets.push(BucketStats {
                    k,
                    bucket: label.to_string(),
                    tasks: members.len(),
                    successes: wins.len(),
                    success_rate: wins.len() as f64 / members.len() as f64,
                    mean_steps_to_success: (!wins.is_empty())
                        .then(|| wins.iter().sum::<usize>() as f64 / wins.len() as f64),
                });
            }
        }
        let success_rate = tasks.iter().filter(|t| t.success).count() as f64 / tasks.len() as f64;
        EvalReport { mode, success_rate, buckets, tasks }
    }

    /// Success rate over all tasks with `k` arms.
    pub fn success_rate_for(&self, k: usize) -> Option<f64> {
        let m: Vec<&TaskResult> = self.tasks.iter().filter(|t| t.k == k).collect();
        (!m.is_empty()).then(|| m.iter().filter(|t| t.success).count() as f64 / m.len() as f64)
    }

    pub fn arm_counts(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.tasks.iter().map(|t| t.k).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    /// Writes `<stem>.json` (full report) and `<stem>.csv` (bucket table).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let json = dir.join(format!("{stem}.json"));
        let f = File::create(&json).map_err(|e| Error::io(&json, e))?;
        serde_json::to_writer_pretty(f, self)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
        for b in &self.buckets {
            w.serialize(b).map_err(|e| csv_error(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok((json, csv_path))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn check_dataset(dataset: &TaskDataset, mode: TaskMode) -> Result<()> {
    if dataset.tasks.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    if dataset.header.mode != mode {
        return Err(Error::Usage(format!("dataset holds {} tasks, asked to evaluate {mode}", dataset.header.mode)));
    }
    if let Some(t) = dataset.tasks.iter().find(|t| t.mode != mode) {
        return Err(Error::Usage(format!("task {} is {}, expected {mode}", t.id, t.mode)));
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| Error::Config(e.to_string()))
}

/// Deterministic-action rollouts of `policy` on every task.
pub fn evaluate(
    policy: &Network,
    dataset: &TaskDataset,
    mode: TaskMode,
    arm: &Arc<ArmModel>,
    env_config: EnvConfig,
    workers: usize,
) -> Result<EvalReport> {
    check_dataset(dataset, mode)?;
    let results = pool(workers)?.install(|| {
        dataset
            .tasks
            .par_iter()
            .map(|task| {
                let mut env = MultiArmEnv::new(arm.clone(), env_config)?;
                let mut actor = PolicyActor::deterministic(policy);
                let ep = collect_episode(&mut env, task, &mut actor, false)?;
                if let Some(e) = actor.take_error() {
                    return Err(e);
                }
                Ok(TaskResult {
                    id: task.id,
                    k: task.k,
                    bucket: task_bucket(task).to_string(),
                    success: ep.success,
                    collided: ep.collided,
                    steps: ep.steps,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport::from_results(mode, results))
}

pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &TaskDataset,
    mode: TaskMode,
    arm: &Arc<ArmModel>,
    env_config: EnvConfig,
    workers: usize,
) -> Result<EvalReport> {
    let c = Checkpoint::load(checkpoint)?;
    evaluate(&c.policy(), dataset, mode, arm, env_config, workers)
}

/// Outcome of the planner baseline on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpisode {
    pub success: bool,
    pub steps: usize,
    pub plans: usize,
    pub planning_seconds: f64,
}

/// Centralized planner baseline: plan from the current configuration to the
/// current goal, execute the whole plan, and re-plan while the episode lasts.
/// Static goals never move, so a static task gets a single plan.
pub fn birrt_episode(
    task: &Task,
    arm: &Arc<ArmModel>,
    planner: &PlannerParams,
    decimation_tolerance: f64,
    env_config: EnvConfig,
) -> Result<BaselineEpisode> {
    let mut env = MultiArmEnv::new(arm.clone(), env_config)?;
    env.reset(task)?;
    let dynamic = match task.mode {
        TaskMode::Dynamic => Some(DynamicTargets::new(task, arm, env_config.dt)?),
        TaskMode::Static => None,
    };
    let world = task.world(arm)?;
    let mut plans = 0;
    let mut seconds = 0.0;
    while !env.is_done() {
        let start = env.joint_configs().to_vec();
        let goal = match &dynamic {
            Some(d) => d.configs(env.step_count()),
            None => task.q2.clone(),
        };
        let params = PlannerParams { rng_seed: child_seed(planner.rng_seed, plans as u64), ..*planner };
        plans += 1;
        let (result, t) = timed_plan(&world, &start, &goal, &params);
        seconds += t;
        let actions = match result {
            Ok(p) => {
                let d = decimate_in_world(&p.trajectory, decimation_tolerance, &world, params.resolution);
                to_actions(&d, env_config.action_scale)
            }
            Err(Error::PlanFailed { .. }) | Err(Error::PlannerPrecondition(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let n = actions.first().map_or(0, Vec::len) + env_config.action_delay_steps;
        let mut script = ScriptedActions::new(actions, env_config.action_scale);
        let observations = env.observations();
        // A failed or empty plan still advances time by one idle step.
        for s in 0..n.max(1) {
            if env.is_done() {
                break;
            }
            let a = crate::env::ActionSource::act(&mut script, &observations, s);
            env.step(&a)?;
        }
        if task.mode == TaskMode::Static {
            break;
        }
    }
    Ok(BaselineEpisode { success: env.success(), steps: env.step_count(), plans, planning_seconds: seconds })
}

/// Planner baseline over a dataset, bucketed like [`evaluate`].
pub fn evaluate_birrt(
    dataset: &TaskDataset,
    mode: TaskMode,
    arm: &Arc<ArmModel>,
    planner: &PlannerParams,
    decimation_tolerance: f64,
    env_config: EnvConfig,
    workers: usize,
) -> Result<EvalReport> {
    check_dataset(dataset, mode)?;
    let results = pool(workers)?.install(|| {
        dataset
            .tasks
            .par_iter()
            .map(|task| {
                let p = PlannerParams { rng_seed: child_seed(planner.rng_seed, task.id), ..*planner };
                let b = birrt_episode(task, arm, &p, decimation_tolerance, env_config)?;
                Ok(TaskResult {
                    id: task.id,
                    k: task.k,
                    bucket: task_bucket(task).to_string(),
                    success: b.success,
                    collided: false,
                    steps: b.steps,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport::from_results(mode, results))
}

/// Median and interquartile range of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
    pub samples: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        Some(Spread { median: q(0.5), iqr: q(0.75) - q(0.25), samples: v.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    /// Timed repetitions per measurement, after warm-up.
    pub repetitions: usize,
    pub warmup: usize,
    pub planner: PlannerParams,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams { repetitions: 20, warmup: 3, planner: PlannerParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub tasks: usize,
    pub mean_sequence_len: f64,
    /// One policy forward pass for one arm, ms.
    pub forward_ms: Option<Spread>,
    /// Sum of forward-pass times over a deterministic episode, ms.
    pub policy_episode_ms: Option<Spread>,
    /// Centralized planning wall time, s, over successful plans.
    pub birrt_seconds: Option<Spread>,
    pub birrt_success_rate: f64,
}

/// Runtime table over datasets grouped by arm count. Runs single-threaded.
pub fn bench_runtime(
    policy: Option<&Network>,
    tasks_by_k: &[(usize, Vec<Task>)],
    arm: &Arc<ArmModel>,
    env_config: EnvConfig,
    params: &BenchParams,
) -> Result<Vec<BenchRow>> {
    if params.repetitions < 20 {
        return Err(Error::Config("timing needs at least 20 repetitions".into()));
    }
    let mut rows = Vec::new();
    for (k, tasks) in tasks_by_k {
        if tasks.is_empty() {
            return Err(Error::Usage(format!("no tasks for k = {k}")));
        }
        let mut forward = Vec::new();
        let mut episode = Vec::new();
        let mut seq_len = Vec::new();
        if let Some(policy) = policy {
            for task in tasks {
                let mut env = MultiArmEnv::new(arm.clone(), env_config)?;
                let obs = env.reset(task)?;
                for o in &obs {
                    seq_len.push(o.len() as f64);
                }
                let seq = obs[0].clone();
                for rep in 0..params.warmup + params.repetitions {
                    let t = Instant::now();
                    std::hint::black_box(policy_forward(policy, &seq)?);
                    if rep >= params.warmup {
                        forward.push(t.elapsed().as_secs_f64() * 1e3);
                    }
                }
                let mut total = 0.0;
                let mut obs = obs;
                while !env.is_done() {
                    let mut actions = Vec::with_capacity(obs.len());
                    for o in &obs {
                        let t = Instant::now();
                        let d = policy_forward(policy, o)?;
                        total += t.elapsed().as_secs_f64() * 1e3;
                        actions.push(d.deterministic());
                    }
                    obs = env.step(&actions)?.observations;
                }
                episode.push(total);
            }
        }
        let mut birrt = Vec::new();
        let mut attempts = 0usize;
        for task in tasks {
            let world = task.world(arm)?;
            for rep in 0..params.warmup + params.repetitions {
                let p = PlannerParams {
                    rng_seed: child_seed(child_seed(params.planner.rng_seed, task.id), rep as u64),
                    ..params.planner
                };
                let (r, s) = timed_plan(&world, &task.q1, &task.q2, &p);
                if rep < params.warmup {
                    continue;
                }
                attempts += 1;
                match r {
                    Ok(_) => birrt.push(s),
                    Err(Error::PlanFailed { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        rows.push(BenchRow {
            k: *k,
            tasks: tasks.len(),
            mean_sequence_len: if seq_len.is_empty() { 0.0 } else { seq_len.iter().sum::<f64>() / seq_len.len() as f64 },
            forward_ms: Spread::of(&forward),
            policy_episode_ms: Spread::of(&episode),
            birrt_seconds: Spread::of(&birrt),
            birrt_success_rate: birrt.len() as f64 / attempts.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(
        "k,tasks,mean_sequence_len,forward_ms_median,forward_ms_iqr,policy_episode_ms_median,policy_episode_ms_iqr,birrt_s_median,birrt_s_iqr,birrt_success_rate\n",
    );
    let cell = |s: Option<Spread>| s.map_or((String::new(), String::new()), |s| (s.median.to_string(), s.iqr.to_string()));
    for r in rows {
        let (fm, fi) = cell(r.forward_ms);
        let (em, ei) = cell(r.policy_episode_ms);
        let (bm, bi) = cell(r.birrt_seconds);
        out.push_str(&format!(
            "{},{},{},{fm},{fi},{em},{ei},{bm},{bi},{}\n",
            r.k, r.tasks, r.mean_sequence_len, r.birrt_success_rate
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One method in the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub name: String,
    pub ablation: Ablation,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// None when the checkpoint is missing.
    pub success_by_k: Option<Vec<(usize, f64)>>,
}

pub const ABSENT: &str = "absent";

/// Evaluates every entry under identical conditions. The individualistic
/// policy is evaluated without observations of other arms, as it was trained.
pub fn compare_ablations(
    entries: &[AblationEntry],
    dataset: &TaskDataset,
    arm: &Arc<ArmModel>,
    env_config: EnvConfig,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    let mode = dataset.header.mode;
    check_dataset(dataset, mode)?;
    let mut ks: Vec<usize> = dataset.tasks.iter().map(|t| t.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::new();
    for e in entries {
        let c = match &e.checkpoint {
            Some(p) if p.exists() => Some(Checkpoint::load(p)?),
            _ => None,
        };
        let success_by_k = match c {
            None => None,
            Some(c) => {
                let mut cfg = env_config;
                cfg.observe_others = e.ablation != Ablation::Individualistic;
                let r = evaluate(&c.policy(), dataset, mode, arm, cfg, workers)?;
                Some(ks.iter().map(|&k| (k, r.success_rate_for(k).unwrap_or(0.0))).collect())
            }
        };
        rows.push(AblationRow { name: e.name.clone(), success_by_k });
    }
    Ok(rows)
}

/// Methods as rows, arm counts as columns; missing methods read `absent`.
pub fn ablation_csv(rows: &[AblationRow], ks: &[usize]) -> String {
    let mut out = String::from("method");
    for k in ks {
        out.push_str(&format!(",k{k}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.name);
        for k in ks {
            out.push(',');
            match &r.success_by_k {
                None => out.push_str(ABSENT),
                Some(v) => {
                    if let Some((_, s)) = v.iter().find(|(kk, _)| kk == k) {
                        out.push_str(&s.to_string());
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`ablation_csv`].
pub fn parse_ablation_csv(text: &str) -> Result<(Vec<usize>, Vec<AblationRow>)> {
    let mut lines = text.lines();
    let bad = |line: usize, m: &str| Error::Parse { path: "<ablation csv>".into(), line, message: m.into() };
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let ks: Vec<usize> = header
        .split(',')
        .skip(1)
        .map(|c| c.strip_prefix('k').and_then(|n| n.parse().ok()).ok_or_else(|| bad(1, "bad column")))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let name = cells.next().unwrap_or_default().to_string();
        let cells: Vec<&str> = cells.collect();
        if cells.len() != ks.len() {
            return Err(bad(i + 2, "wrong number of cells"));
        }
        let success_by_k = if cells.iter().all(|c| *c == ABSENT) {
            None
        } else {
            let mut v = Vec::new();
            for (k, c) in ks.iter().zip(&cells) {
                if !c.is_empty() {
                    v.push((*k, c.parse::<f64>().map_err(|e| bad(i + 2, &e.to_string()))?));
                }
            }
            Some(v)
        };
        rows.push(AblationRow { name, success_by_k });
    }
    Ok((ks, rows))
}

/// Runs the planner once per task in `tasks` and reports success; used to
/// check that a dataset is solvable.
pub fn planner_success_rate(tasks: &[Task], arm: &Arc<ArmModel>, planner: &PlannerParams) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Usage("no tasks".into()));
    }
    let mut ok = 0;
    for t in tasks {
        let world = t.world(arm)?;
        let p = PlannerParams { rng_seed: child_seed(planner.rng_seed, t.id), ..*planner };
        match plan(&world, &t.q1, &t.q2, &p) {
            Ok(_) => ok += 1,
            Err(Error::PlanFailed { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ok as f64 / tasks.len() as f64)
}
