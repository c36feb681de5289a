//! Centralized RRT-Connect in composite joint space, polyline decimation and
//! conversion of plans into capped delta-joint actions.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{segment_collision_free, World};
use crate::error::{Error, Result};
use crate::kinematics::{ArmModel, JointConfig, DOF};
use crate::seed::{child_seed, rng_from, Rng64};
use crate::taskgen::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    pub max_iterations: usize,
    /// Collision-check resolution along edges, rad.
    pub resolution: f64,
    /// Euclidean extension length in composite space, rad.
    pub steer_step: f64,
    pub goal_sample_prob: f64,
    pub rng_seed: u64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams { max_iterations: 4000, resolution: 0.05, steer_step: 0.2, goal_sample_prob: 0.1, rng_seed: 0 }
    }
}

impl PlannerParams {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || !(self.resolution > 0.0)
            || !(self.steer_step >= self.resolution)
            || !(0.0..=1.0).contains(&self.goal_sample_prob)
        {
            return Err(Error::Config(format!("invalid planner parameters {self:?}")));
        }
        Ok(())
    }
}

/// Composite joint-space path; `waypoints[i][arm]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vec<JointConfig>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn arm_count(&self) -> usize {
        self.waypoints.first().map_or(0, Vec::len)
    }

    /// Every consecutive pair is connected by a collision-free segment.
    pub fn is_valid(&self, world: &World, resolution: f64) -> bool {
        !self.waypoints.is_empty()
            && self.waypoints.windows(2).all(|w| segment_collision_free(world, &w[0], &w[1], resolution))
            && (self.waypoints.len() > 1 || segment_collision_free(world, &self.waypoints[0], &self.waypoints[0], resolution))
    }

    pub fn flat(&self) -> Vec<Vec<f64>> {
        self.waypoints.iter().map(|w| flatten(w)).collect()
    }

    pub fn from_flat(flat: &[Vec<f64>]) -> Result<Self> {
        flat.iter().map(|v| unflatten(v)).collect::<Result<Vec<_>>>().map(|waypoints| Trajectory { waypoints })
    }
}

pub fn flatten(q: &[JointConfig]) -> Vec<f64> {
    q.iter().flat_map(|c| c.0).collect()
}

pub fn unflatten(v: &[f64]) -> Result<Vec<JointConfig>> {
    if v.len() % DOF != 0 {
        return Err(Error::Shape(format!("composite configuration of length {} is not a multiple of {DOF}", v.len())));
    }
    Ok(v.chunks_exact(DOF).map(|c| JointConfig(c.try_into().expect("chunk of DOF"))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub trajectory: Trajectory,
    pub iterations_used: usize,
}

struct Tree {
    dim: usize,
    nodes: Vec<f64>,
    parents: Vec<usize>,
}

impl Tree {
    fn new(root: &[f64]) -> Self {
        Tree { dim: root.len(), nodes: root.to_vec(), parents: vec![usize::MAX] }
    }

    fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    fn push(&mut self, q: &[f64], parent: usize) -> usize {
        self.nodes.extend_from_slice(q);
        self.parents.push(parent);
        self.parents.len() - 1
    }

    fn nearest(&self, q: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.chunks_exact(self.dim).enumerate() {
            let d: f64 = n.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Node chain from `i` back to the root.
    fn chain(&self, mut i: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.node(i).to_vec());
            i = self.parents[i];
        }
        out
    }
}

enum Extend {
    Reached(usize),
    Advanced(usize),
    Trapped,
}

struct Planner<'a> {
    world: &'a World,
    params: &'a PlannerParams,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Planner<'_> {
    fn free(&self, a: &[f64], b: &[f64]) -> bool {
        match (unflatten(a), unflatten(b)) {
            (Ok(a), Ok(b)) => segment_collision_free(self.world, &a, &b, self.params.resolution),
            _ => false,
        }
    }

    fn extend(&self, tree: &mut Tree, target: &[f64]) -> Extend {
        let near = tree.nearest(target);
        let from = tree.node(near).to_vec();
        let dist = from.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let (new, reached) = if dist <= self.params.steer_step {
            (target.to_vec(), true)
        } else {
            let s = self.params.steer_step / dist;
            (from.iter().zip(target).map(|(a, b)| a + (b - a) * s).collect(), false)
        };
        if !self.free(&from, &new) {
            return Extend::Trapped;
        }
        let id = tree.push(&new, near);
        if reached {
            Extend::Reached(id)
        } else {
            Extend::Advanced(id)
        }
    }

    fn connect(&self, tree: &mut Tree, target: &[f64]) -> Extend {
        loop {
            match self.extend(tree, target) {
                Extend::Advanced(_) => continue,
                other => return other,
            }
        }
    }

    fn sample(&self, rng: &mut Rng64) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| rng.random_range(*lo..*hi)).collect()
    }
}

/// Plans a collision-free composite path from `start` to `goal`.
pub fn plan(world: &World, start: &[JointConfig], goal: &[JointConfig], params: &PlannerParams) -> Result<Plan> {
    params.validate()?;
    for (name, q) in [("start", start), ("goal", goal)] {
        if world.in_collision(q)? {
            return Err(Error::PlannerPrecondition(format!("{name} configuration is in collision")));
        }
    }
    let s = flatten(start);
    let g = flatten(goal);
    if s == g {
        return Ok(Plan { trajectory: Trajectory { waypoints: vec![start.to_vec()] }, iterations_used: 0 });
    }
    let lower = world.arms.iter().flat_map(|a| a.model.limits.map(|l| l.0)).collect();
    let upper = world.arms.iter().flat_map(|a| a.model.limits.map(|l| l.1)).collect();
    let planner = Planner { world, params, lower, upper };
    if planner.free(&s, &g) {
        return Ok(Plan { trajectory: Trajectory { waypoints: vec![start.to_vec(), goal.to_vec()] }, iterations_used: 1 });
    }

    let mut rng = rng_from(params.rng_seed);
    let mut a = Tree::new(&s);
    let mut b = Tree::new(&g);
    let mut a_is_start = true;
    for iter in 0..params.max_iterations {
        let target = if rng.random::<f64>() < params.goal_sample_prob { b.node(0).to_vec() } else { planner.sample(&mut rng) };
        let new = match planner.extend(&mut a, &target) {
            Extend::Reached(i) | Extend::Advanced(i) => i,
            Extend::Trapped => {
                std::mem::swap(&mut a, &mut b);
                a_is_start = !a_is_start;
                continue;
            }
        };
        let q_new = a.node(new).to_vec();
        if let Extend::Reached(j) = planner.connect(&mut b, &q_new) {
            let (ts, is, tg, ig) = if a_is_start { (&a, new, &b, j) } else { (&b, j, &a, new) };
            let mut path = ts.chain(is);
            path.reverse();
            // The meeting node appears in both chains.
            path.extend(tg.chain(ig).into_iter().skip(1));
            let trajectory = Trajectory::from_flat(&path)?;
            return Ok(Plan { trajectory, iterations_used: iter + 1 });
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    Err(Error::PlanFailed { iterations: params.max_iterations })
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// Max-norm distance from `p` to the point of segment [a, b] closest in the
/// Euclidean sense. This bounds the true max-norm distance from above.
pub fn deviation_from_segment(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (p.iter().zip(a).zip(&ab).map(|((p, a), d)| (p - a) * d).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let proj: Vec<f64> = a.iter().zip(&ab).map(|(a, d)| a + t * d).collect();
    linf(p, &proj)
}

fn douglas_peucker(pts: &[Vec<f64>], tol: f64, keep: &mut [bool], accept: &dyn Fn(usize, usize) -> bool) {
    let mut stack = vec![(0, pts.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let mut worst = (-1.0, lo + 1);
        for i in lo + 1..hi {
            let d = deviation_from_segment(&pts[i], &pts[lo], &pts[hi]);
            if d > worst.0 {
                worst = (d, i);
            }
        }
        if worst.0 > tol || !accept(lo, hi) {
            keep[worst.1] = true;
            stack.push((worst.1, hi));
            stack.push((lo, worst.1));
        }
    }
}

/// Douglas–Peucker simplification under the max-norm tolerance `tol`.
pub fn decimate(traj: &Trajectory, tol: f64) -> Trajectory {
    decimate_with(traj, tol, &|_, _| true)
}

/// Like [`decimate`], but a shortcut is only taken when its segment is
/// collision-free, so the result stays valid in `world`.
pub fn decimate_in_world(traj: &Trajectory, tol: f64, world: &World, resolution: f64) -> Trajectory {
    let w = &traj.waypoints;
    decimate_with(traj, tol, &|i, j| segment_collision_free(world, &w[i], &w[j], resolution))
}

fn decimate_with(traj: &Trajectory, tol: f64, accept: &dyn Fn(usize, usize) -> bool) -> Trajectory {
    assert!(tol > 0.0, "decimation tolerance must be positive");
    let n = traj.waypoints.len();
    if n <= 2 {
        return traj.clone();
    }
    let pts = traj.flat();
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    douglas_peucker(&pts, tol, &mut keep, accept);
    Trajectory {
        waypoints: traj.waypoints.iter().zip(&keep).filter(|(_, k)| **k).map(|(w, _)| w.clone()).collect(),
    }
}

/// Splits the path into lock-step composite actions whose components never
/// exceed `cap`. Returns `actions[arm][step]`, in radians.
pub fn to_actions(traj: &Trajectory, cap: f64) -> Vec<Vec<[f64; DOF]>> {
    assert!(cap > 0.0, "action cap must be positive");
    let k = traj.arm_count();
    let mut out = vec![Vec::new(); k];
    let Some(first) = traj.waypoints.first() else { return out };
    let mut cur = flatten(first);
    for w in &traj.waypoints[1..] {
        let w = flatten(w);
        let delta: Vec<f64> = w.iter().zip(&cur).map(|(a, b)| a - b).collect();
        let m = delta.iter().fold(0.0, |m: f64, d| m.max(d.abs()));
        if m == 0.0 {
            continue;
        }
        let n = (m / cap).ceil().max(1.0) as usize;
        let scale = cap / m;
        for s in 0..n {
            let step: Vec<f64> = if s + 1 == n {
                w.iter().zip(&cur).map(|(a, b)| (a - b).clamp(-cap, cap)).collect()
            } else {
                delta.iter().map(|d| (d * scale).clamp(-cap, cap)).collect()
            };
            for (c, d) in cur.iter_mut().zip(&step) {
                *c += d;
            }
            for (arm, chunk) in step.chunks_exact(DOF).enumerate() {
                out[arm].push(chunk.try_into().expect("chunk of DOF"));
            }
        }
    }
    out
}

/// One line of the expert file. An empty `waypoints` list marks a task the
/// planner gave up on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub id: u64,
    pub waypoints: Vec<Vec<f64>>,
    pub seed: u64,
    pub iterations_used: usize,
}

impl ExpertRecord {
    pub fn trajectory(&self) -> Result<Option<Trajectory>> {
        if self.waypoints.is_empty() {
            return Ok(None);
        }
        Trajectory::from_flat(&self.waypoints).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertParams {
    pub planner: PlannerParams,
    pub decimation_tolerance: f64,
    pub action_cap: f64,
    /// Episode budget the replayed actions (plus the action delay) must fit in.
    pub max_steps: usize,
    pub action_delay_steps: usize,
    pub max_replans: usize,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            planner: PlannerParams::default(),
            decimation_tolerance: 0.01,
            action_cap: 0.5,
            max_steps: 500,
            action_delay_steps: 1,
            max_replans: 5,
        }
    }
}

/// Plans, decimates and budget-checks one task, re-planning with fresh seeds.
pub fn expert_for_task(task: &Task, arm: &Arc<ArmModel>, seed: u64, params: &ExpertParams) -> Result<ExpertRecord> {
    let world = task.world(arm)?;
    let base = child_seed(seed, task.id);
    let mut last_seed = base;
    let mut iterations = 0;
    for attempt in 0..params.max_replans {
        let s = child_seed(base, attempt as u64);
        last_seed = s;
        let pp = PlannerParams { rng_seed: s, ..params.planner };
        match plan(&world, &task.q1, &task.q2, &pp) {
            Ok(p) => {
                iterations = p.iterations_used;
                let d = decimate_in_world(&p.trajectory, params.decimation_tolerance, &world, pp.resolution);
                let steps = to_actions(&d, params.action_cap).first().map_or(0, Vec::len);
                if steps + params.action_delay_steps <= params.max_steps {
                    return Ok(ExpertRecord { id: task.id, waypoints: d.flat(), seed: s, iterations_used: iterations });
                }
            }
            Err(Error::PlanFailed { iterations: n }) => iterations = n,
            Err(e) => return Err(e),
        }
    }
    Ok(ExpertRecord { id: task.id, waypoints: Vec::new(), seed: last_seed, iterations_used: iterations })
}

/// Truncates a partially written trailing line and returns the ids already present.
fn recover_expert_file(path: &Path) -> Result<HashSet<u64>> {
    let io = |e| Error::io(path, e);
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(io)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut valid = 0;
    for line in bytes[..complete].split_inclusive(|&b| b == b'\n') {
        match serde_json::from_slice::<ExpertRecord>(line) {
            Ok(r) => {
                done.insert(r.id);
                valid += line.len();
            }
            Err(_) => break,
        }
    }
    file.set_len(valid as u64).map_err(io)?;
    file.seek(SeekFrom::End(0)).map_err(io)?;
    Ok(done)
}

/// Writes expert records for `tasks` to `path` in task order, skipping ids
/// already present so an interrupted run can be resumed.
pub fn generate_expert_file(
    tasks: &[Task],
    arm: &Arc<ArmModel>,
    seed: u64,
    params: &ExpertParams,
    path: &Path,
    workers: usize,
) -> Result<usize> {
    let done = recover_expert_file(path)?;
    let todo: Vec<&Task> = tasks.iter().filter(|t| !done.contains(&t.id)).collect();
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let chunk = workers.max(1) * 4;
    let mut written = 0;
    for batch in todo.chunks(chunk) {
        let records: Vec<ExpertRecord> =
            pool.install(|| batch.par_iter().map(|t| expert_for_task(t, arm, seed, params)).collect::<Result<_>>())?;
        let mut buf = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
        written += records.len();
    }
    Ok(written)
}

pub fn read_expert_file(path: &Path) -> Result<Vec<ExpertRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ExpertRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Wall-clock seconds for one planning query.
pub fn timed_plan(world: &World, start: &[JointConfig], goal: &[JointConfig], params: &PlannerParams) -> (Result<Plan>, f64) {
    let t = Instant::now();
    let r = plan(world, start, goal, params);
    (r, t.elapsed().as_secs_f64())
}
