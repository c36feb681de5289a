//! Randomized audits shared by the integration tests and the acceptance run.
//! Each returns violation counts instead of panicking.

use std::sync::Arc;

use multiarm::birrt::{flatten, Trajectory};
use multiarm::collision::check_collision;
use multiarm::env::{collect_episode, layout, Action, EnvConfig, LogRecord, MultiArmEnv, ObservationSequence, RewardScheme};
use multiarm::kinematics::{ArmModel, JointConfig, DOF};
use multiarm::seed::rng_from;
use multiarm::taskgen::{generate_dataset, sample_base_poses, Task, TaskGenParams, TaskMode};
use rand::Rng;

use super::recount_episode;

#[derive(Debug, Default)]
pub struct RewardAudit {
    pub episodes: usize,
    pub mismatches: usize,
    pub dynamics_violations: usize,
    pub over_bound: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub full_length: usize,
}

/// Random episodes under a mix of goal-seeking and noisy actions, each log
/// recounted by the independent oracle.
pub fn reward_audit(arm: &Arc<ArmModel>, episodes: usize, seed: u64) -> RewardAudit {
    let mut rng = rng_from(seed);
    let static_tasks =
        generate_dataset(arm, seed, 60, (1, 4), TaskMode::Static, &TaskGenParams::default(), 1).unwrap().tasks;
    let dynamic_tasks =
        generate_dataset(arm, seed + 1, 60, (1, 4), TaskMode::Dynamic, &TaskGenParams::default(), 1).unwrap().tasks;
    let mut out = RewardAudit { episodes, ..RewardAudit::default() };
    for n in 0..episodes {
        let task = if n % 2 == 0 { &static_tasks[n / 2 % 60] } else { &dynamic_tasks[n / 2 % 60] };
        let config = EnvConfig {
            position_tolerance: rng.random_range(0.02..0.4),
            orientation_tolerance: rng.random_range(0.1..3.2),
            max_steps: if n % 10 == 0 { 500 } else { rng.random_range(1..80) },
            reward_scheme: if n % 3 == 0 { RewardScheme::Selfish } else { RewardScheme::Team },
            action_delay_steps: n % 2,
            ..EnvConfig::default()
        };
        let mut env = MultiArmEnv::new(arm.clone(), config).unwrap();
        // Every tenth episode drifts slowly without a goal to reach the step bound.
        let drift = n % 10 == 0;
        let noise = if drift { 0.005 } else { rng.random_range(0.0..1.5) };
        let goal = task.q2.clone();
        let mut policy_rng = rng_from(seed ^ (1000 + n as u64));
        let mut source = |obs: &[Arc<ObservationSequence>], _step: usize| -> Vec<Action> {
            obs.iter()
                .enumerate()
                .map(|(i, o)| {
                    let own = o.states.last().unwrap();
                    let q = &own.as_slice()[layout::JOINTS..layout::JOINTS + DOF];
                    std::array::from_fn(|j| {
                        let pull = if drift { 0.0 } else { (goal[i].0[j] - q[j]) / 0.5 };
                        pull + policy_rng.random_range(-noise..=noise)
                    })
                })
                .collect()
        };
        let ep = collect_episode(&mut env, task, &mut source, true).unwrap();
        out.mismatches += recount_episode(arm, &ep.log);
        out.dynamics_violations += audit_dynamics(arm, task, &config, &ep.log);
        out.over_bound += usize::from(ep.steps > config.max_steps || ep.steps > 500);
        out.successes += usize::from(ep.success);
        out.collisions += usize::from(ep.collided);
        out.timeouts += usize::from(!ep.success && !ep.collided && ep.steps > 0);
        out.full_length += usize::from(ep.steps == 500);
    }
    out
}

/// Delay queue, clipping, scaling, limit clamping and collision stops.
fn audit_dynamics(arm: &Arc<ArmModel>, task: &Task, config: &EnvConfig, log: &[LogRecord]) -> usize {
    let world = task.world(arm).unwrap();
    let LogRecord::Reset { q: q0, .. } = &log[0] else { return 1 };
    let mut errors = 0;
    let mut prev_q = q0.clone();
    let mut sent: Vec<Vec<Action>> = Vec::new();
    for rec in &log[1..] {
        let LogRecord::Step { step, actions, applied, q, collided_arms, .. } = rec else { return errors + 1 };
        sent.push(actions.clone());
        let expect: Vec<Action> = if *step > config.action_delay_steps {
            sent[step - 1 - config.action_delay_steps].iter().map(|a| a.map(|v| v.clamp(-1.0, 1.0))).collect()
        } else {
            vec![[0.0; DOF]; task.k]
        };
        errors += usize::from(applied != &expect);
        let report = check_collision(&world, q).unwrap();
        if collided_arms.is_empty() {
            errors += usize::from(!report.pairs.is_empty());
            for i in 0..task.k {
                for j in 0..DOF {
                    let (lo, hi) = arm.limits[j];
                    let want = (prev_q[i].0[j] + config.action_scale * applied[i][j]).clamp(lo, hi);
                    errors += usize::from((q[i].0[j] - want).abs() >= 1e-12);
                }
            }
        } else {
            let mut arms = report.colliding_arms();
            arms.sort_unstable();
            errors += usize::from(&arms != collided_arms);
        }
        prev_q = q.clone();
    }
    errors
}

#[derive(Debug, Default)]
pub struct ObservationAudit {
    pub layouts: usize,
    pub order_violations: usize,
    pub membership_violations: usize,
    pub width_violations: usize,
    pub content_violations: usize,
    pub neighbours_seen: usize,
}

impl ObservationAudit {
    pub fn violations(&self) -> usize {
        self.order_violations + self.membership_violations + self.width_violations + self.content_violations
    }
}

/// Random base layouts with up to 8 arms packed tightly enough that many
/// neighbours fall inside the observation radius.
pub fn observation_audit(arm: &Arc<ArmModel>, layouts: usize, seed: u64) -> ObservationAudit {
    let mut rng = rng_from(seed);
    let dense = TaskGenParams { square_scale: 0.6, ..TaskGenParams::default() };
    let mut out = ObservationAudit { layouts, ..ObservationAudit::default() };
    for n in 0..layouts {
        let k = 1 + n % 8;
        let bases = sample_base_poses(k, &dense, &mut rng).unwrap();
        let q: Vec<JointConfig> = (0..k).map(|_| arm.random_config(&mut rng)).collect();
        let task = Task {
            id: n as u64,
            k,
            mode: TaskMode::Static,
            bases: bases.clone(),
            q1: q.clone(),
            q2: q.clone(),
            q3: q.clone(),
            speed: None,
            difficulty: 0.0,
        };
        let observe_others = n % 50 != 0;
        let mut env = MultiArmEnv::new(arm.clone(), EnvConfig { observe_others, ..EnvConfig::default() }).unwrap();
        let obs = env.reset(&task).unwrap();
        for (i, o) in obs.iter().enumerate() {
            let dist = |j: usize| {
                let d = bases[j].position - bases[i].position;
                (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
            };
            let mut members: Vec<usize> =
                if observe_others { (0..k).filter(|&j| j != i && dist(j) <= 0.85).collect() } else { Vec::new() };
            let mut got: Vec<usize> = o.arms[..o.arms.len().saturating_sub(1)].to_vec();
            out.order_violations += usize::from(o.arms.last() != Some(&i));
            out.order_violations += got.windows(2).filter(|w| dist(w[0]) < dist(w[1])).count();
            got.sort_unstable();
            members.sort_unstable();
            out.membership_violations += usize::from(got != members);
            out.neighbours_seen += o.arms.len().saturating_sub(1);
            out.width_violations += usize::from(o.states.len() != o.arms.len());
            let inv = bases[i].orientation.inverse();
            for (s, &j) in o.states.iter().zip(&o.arms) {
                out.width_violations += usize::from(s.as_slice().len() != 107);
                let rel = inv * (bases[j].position - bases[i].position);
                let finite = s.as_slice().iter().all(|v| v.is_finite());
                let cur = s.current(layout::JOINTS, DOF);
                let bad = !finite
                    || (s.base_position() - rel).norm() >= 1e-9
                    || cur != &q[j].0[..]
                    || cur != s.previous(layout::JOINTS, DOF);
                out.content_violations += usize::from(bad);
            }
        }
    }
    out
}

/// Exact max-norm distance from `p` to segment [a, b]. The objective is convex
/// in the segment parameter, so golden-section search finds its minimum.
pub fn linf_to_segment(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let f = |t: f64| p.iter().zip(a).zip(b).map(|((p, a), b)| (p - (a + t * (b - a))).abs()).fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    f(0.5 * (lo + hi)).min(f(0.0)).min(f(1.0))
}

/// Largest max-norm distance of an original waypoint from the simplified curve.
pub fn max_deviation(original: &Trajectory, simplified: &Trajectory) -> f64 {
    let s = simplified.flat();
    original
        .flat()
        .iter()
        .map(|p| {
            if s.len() == 1 {
                return p.iter().zip(&s[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            }
            s.windows(2).map(|w| linf_to_segment(p, &w[0], &w[1])).fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Every configuration along the path at `step` rad spacing is collision-free.
pub fn densified_valid(task: &Task, arm: &Arc<ArmModel>, traj: &Trajectory, step: f64) -> bool {
    let world = task.world(arm).unwrap();
    let w = &traj.waypoints;
    w.windows(2).all(|pair| {
        let (a, b) = (flatten(&pair[0]), flatten(&pair[1]));
        let m = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let n = ((m / step).ceil() as usize).max(1);
        (0..=n).all(|i| {
            let t = i as f64 / n as f64;
            let q: Vec<JointConfig> = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x + t * (y - x))
                .collect::<Vec<_>>()
                .chunks(DOF)
                .map(|c| JointConfig(c.try_into().unwrap()))
                .collect();
            check_collision(&world, &q).unwrap().pairs.is_empty()
        })
    }) && check_collision(&world, &w[0]).unwrap().pairs.is_empty()
}

/// Open-loop replay of per-arm actions from the first waypoint; returns the
/// largest joint error at the last waypoint.
pub fn replay(traj: &Trajectory, actions: &[Vec<[f64; DOF]>]) -> f64 {
    let start = &traj.waypoints[0];
    let end = traj.waypoints.last().unwrap();
    let mut worst: f64 = 0.0;
    for (arm, seq) in actions.iter().enumerate() {
        let mut q = start[arm].0;
        for a in seq {
            for j in 0..DOF {
                q[j] += a[j];
            }
        }
        for j in 0..DOF {
            worst = worst.max((q[j] - end[arm].0[j]).abs());
        }
    }
    worst
}
