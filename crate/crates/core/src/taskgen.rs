//! Random multi-arm reaching tasks, the workspace-overlap difficulty metric
//! and the JSON-lines dataset format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::World;
use crate::error::{Error, Result};
use crate::kinematics::{solve_ik, ArmModel, JointConfig, Pose};
use crate::seed::{child_rng, rng_from};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_ARMS: usize = 16;
pub const DIFFICULTY_SAMPLES: usize = 200_000;
const DIFFICULTY_SEED: u64 = 0xd1ff_1c01;
/// Dense samples per arm when measuring an end-effector path.
const PATH_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Static,
    Dynamic,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(TaskMode::Static),
            "dynamic" => Ok(TaskMode::Dynamic),
            _ => Err(Error::Config(format!("unknown task mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::Static => "static",
            TaskMode::Dynamic => "dynamic",
        })
    }
}

/// One task. `q1` is the start, `q2` the (initial) target and `q3` the final
/// target of a moving-target task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub k: usize,
    pub mode: TaskMode,
    pub bases: Vec<Pose>,
    pub q1: Vec<JointConfig>,
    pub q2: Vec<JointConfig>,
    pub q3: Vec<JointConfig>,
    pub speed: Option<f64>,
    pub difficulty: f64,
}

impl Task {
    pub fn world(&self, arm: &Arc<ArmModel>) -> Result<World> {
        World::homogeneous(arm.clone(), &self.bases, 0.0)
    }

    /// World-frame target end-effector poses for a static task.
    pub fn static_targets(&self, arm: &ArmModel) -> Vec<Pose> {
        self.bases
            .iter()
            .zip(&self.q2)
            .map(|(b, q)| b.compose(&arm.fk_unchecked(q).ee_pose))
            .collect()
    }
}

/// Knobs for task generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenParams {
    /// Bases are sampled in a square of side `square_scale * sqrt(k)`, m.
    pub square_scale: f64,
    pub min_base_distance: f64,
    pub max_base_tries: usize,
    /// IK plus collision attempts per composite configuration.
    pub max_attempts: usize,
    pub target_min_radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Seconds per environment step.
    pub dt: f64,
}

impl Default for TaskGenParams {
    fn default() -> Self {
        TaskGenParams {
            square_scale: 0.9,
            min_base_distance: 0.30,
            max_base_tries: 1000,
            max_attempts: 10_000,
            target_min_radius: 0.2,
            speed_min: 0.01,
            speed_max: 0.15,
            dt: 1.0 / 240.0,
        }
    }
}

pub fn sample_base_poses<R: Rng + ?Sized>(k: usize, params: &TaskGenParams, rng: &mut R) -> Result<Vec<Pose>> {
    if !(1..=MAX_ARMS).contains(&k) {
        return Err(Error::Generation(format!("arm count {k} outside 1..={MAX_ARMS}")));
    }
    let side = params.square_scale * (k as f64).sqrt();
    let min_d2 = params.min_base_distance * params.min_base_distance;
    for _ in 0..params.max_base_tries {
        let xy: Vec<(f64, f64)> =
            (0..k).map(|_| (rng.random_range(-0.5..0.5) * side, rng.random_range(-0.5..0.5) * side)).collect();
        let ok = (0..k).all(|i| {
            (i + 1..k).all(|j| {
                let (dx, dy) = (xy[i].0 - xy[j].0, xy[i].1 - xy[j].1);
                dx * dx + dy * dy >= min_d2
            })
        });
        if ok {
            return Ok(xy.into_iter().map(|(x, y)| Pose::planar(x, y, 0.0, rng.random_range(0.0..2.0 * PI))).collect());
        }
    }
    Err(Error::Generation(format!(
        "could not place {k} bases {} m apart after {} tries",
        params.min_base_distance, params.max_base_tries
    )))
}

/// Uniform point in the upper hemispherical shell r in [r_min, r_max].
fn sample_shell_point<R: Rng + ?Sized>(r_min: f64, r_max: f64, rng: &mut R) -> Vector3<f64> {
    let u: f64 = rng.random();
    let r = (r_min.powi(3) + u * (r_max.powi(3) - r_min.powi(3))).cbrt();
    let z: f64 = rng.random();
    let phi = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    Vector3::new(r * s * phi.cos(), r * s * phi.sin(), r * z)
}

/// A collision-free composite configuration with IK-placed end effectors.
fn sample_reaching_config<R: Rng + ?Sized>(
    arm: &ArmModel,
    world: &World,
    params: &TaskGenParams,
    rng: &mut R,
) -> Result<Vec<JointConfig>> {
    'attempt: for _ in 0..params.max_attempts {
        let mut q = Vec::with_capacity(world.arm_count());
        for _ in 0..world.arm_count() {
            let target = sample_shell_point(params.target_min_radius, arm.reach, rng);
            match solve_ik(arm, &target, &arm.home, true, rng) {
                Some(qi) => q.push(qi),
                None => continue 'attempt,
            }
        }
        if !world.in_collision(&q)? {
            return Ok(q);
        }
    }
    Err(Error::Generation(format!("no collision-free IK configuration after {} attempts", params.max_attempts)))
}

pub fn generate_task<R: Rng + ?Sized>(
    arm: &Arc<ArmModel>,
    k: usize,
    mode: TaskMode,
    params: &TaskGenParams,
    rng: &mut R,
) -> Result<Task> {
    let bases = sample_base_poses(k, params, rng)?;
    generate_task_with_bases(arm, bases, mode, params, rng)
}

/// Task on caller-chosen bases.
pub fn generate_task_with_bases<R: Rng + ?Sized>(
    arm: &Arc<ArmModel>,
    bases: Vec<Pose>,
    mode: TaskMode,
    params: &TaskGenParams,
    rng: &mut R,
) -> Result<Task> {
    let k = bases.len();
    if k == 0 {
        return Err(Error::Generation("task needs at least one arm".into()));
    }
    let world = World::homogeneous(arm.clone(), &bases, 0.0)?;
    let q1 = sample_reaching_config(arm, &world, params, rng)?;
    let q2 = sample_reaching_config(arm, &world, params, rng)?;
    let q3 = sample_reaching_config(arm, &world, params, rng)?;
    let speed = match mode {
        TaskMode::Static => None,
        TaskMode::Dynamic => Some(rng.random_range(params.speed_min..=params.speed_max)),
    };
    let difficulty = base_difficulty(&bases, &vec![arm.reach; k]);
    Ok(Task { id: 0, k, mode, bases, q1, q2, q3, speed, difficulty })
}

/// Unit-hemisphere sample set, point-symmetric about the z axis so that the
/// pairwise overlap of two equal arms is identical from either side.
fn hemisphere_samples() -> &'static [Vector3<f64>] {
    static SAMPLES: OnceLock<Vec<Vector3<f64>>> = OnceLock::new();
    SAMPLES.get_or_init(|| {
        let mut rng = rng_from(DIFFICULTY_SEED);
        let mut pts = Vec::with_capacity(DIFFICULTY_SAMPLES);
        while pts.len() < DIFFICULTY_SAMPLES {
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
            if p.norm_squared() <= 1.0 {
                pts.push(p);
                pts.push(Vector3::new(-p.x, -p.y, p.z));
            }
        }
        pts
    })
}

/// Largest fraction of one arm's workspace hemisphere covered by the others'.
pub fn base_difficulty(bases: &[Pose], reaches: &[f64]) -> f64 {
    assert_eq!(bases.len(), reaches.len());
    let k = bases.len();
    let samples = hemisphere_samples();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        let ci = bases[i].position;
        let others: Vec<(Vector3<f64>, f64)> = (0..k)
            .filter(|&j| j != i && (bases[j].position - ci).norm() < reaches[i] + reaches[j])
            .map(|j| (bases[j].position - ci, reaches[j] * reaches[j]))
            .collect();
        if others.is_empty() {
            continue;
        }
        let covered = samples
            .iter()
            .filter(|s| {
                let p = *s * reaches[i];
                others.iter().any(|(c, r2)| (p - c).norm_squared() <= *r2)
            })
            .count();
        worst = worst.max(covered as f64 / samples.len() as f64);
    }
    worst
}

pub fn task_difficulty(task: &Task, arm: &ArmModel) -> f64 {
    base_difficulty(&task.bases, &vec![arm.reach; task.k])
}

/// Moving targets of a dynamic task: each arm's end effector follows the
/// FK image of the straight joint-space segment q2 -> q3 at constant speed.
#[derive(Debug, Clone)]
pub struct DynamicTargets {
    arm: Arc<ArmModel>,
    bases: Vec<Pose>,
    q2: Vec<JointConfig>,
    q3: Vec<JointConfig>,
    speed: f64,
    dt: f64,
    path_lengths: Vec<f64>,
}

impl DynamicTargets {
    pub fn new(task: &Task, arm: &Arc<ArmModel>, dt: f64) -> Result<Self> {
        let speed = match (task.mode, task.speed) {
            (TaskMode::Dynamic, Some(s)) => s,
            _ => return Err(Error::Usage(format!("task {} is not a dynamic task", task.id))),
        };
        let path_lengths = task.q2.iter().zip(&task.q3).map(|(a, b)| ee_path_length(arm, a, b, PATH_SAMPLES)).collect();
        Ok(DynamicTargets {
            arm: arm.clone(),
            bases: task.bases.clone(),
            q2: task.q2.clone(),
            q3: task.q3.clone(),
            speed,
            dt,
            path_lengths,
        })
    }

    pub fn path_lengths(&self) -> &[f64] {
        &self.path_lengths
    }

    /// Interpolation parameter of each arm after `step` steps.
    pub fn alphas(&self, step: usize) -> Vec<f64> {
        let travelled = step as f64 * self.dt * self.speed;
        self.path_lengths
            .iter()
            .map(|&len| if len <= 0.0 { 1.0 } else { (travelled / len).min(1.0) })
            .collect()
    }

    pub fn configs(&self, step: usize) -> Vec<JointConfig> {
        self.alphas(step)
            .iter()
            .enumerate()
            .map(|(i, &a)| if a >= 1.0 { self.q3[i] } else { self.q2[i].lerp(&self.q3[i], a) })
            .collect()
    }

    /// World-frame target poses after `step` steps.
    pub fn at(&self, step: usize) -> Vec<Pose> {
        self.configs(step)
            .iter()
            .zip(&self.bases)
            .map(|(q, b)| b.compose(&self.arm.fk_unchecked(q).ee_pose))
            .collect()
    }
}

/// Target poses at `step` of a `total_steps` episode.
pub fn dynamic_target(
    task: &Task,
    arm: &Arc<ArmModel>,
    step: usize,
    total_steps: usize,
    dt: f64,
) -> Result<Vec<Pose>> {
    if step > total_steps {
        return Err(Error::Usage(format!("step {step} beyond episode length {total_steps}")));
    }
    Ok(DynamicTargets::new(task, arm, dt)?.at(step))
}

/// End-effector path length along the joint-space segment, by dense sampling.
pub fn ee_path_length(arm: &ArmModel, a: &JointConfig, b: &JointConfig, samples: usize) -> f64 {
    let mut prev = arm.ee_position_unchecked(a);
    let mut len = 0.0;
    for i in 1..=samples {
        let p = arm.ee_position_unchecked(&a.lerp(b, i as f64 / samples as f64));
        len += (p - prev).norm();
        prev = p;
    }
    len
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub generator_seed: u64,
    pub mode: TaskMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub header: DatasetHeader,
    pub tasks: Vec<Task>,
}

impl TaskDataset {
    pub fn empty(mode: TaskMode, generator_seed: u64) -> Self {
        TaskDataset { header: DatasetHeader { schema_version: SCHEMA_VERSION, generator_seed, mode }, tasks: Vec::new() }
    }
}

pub fn write_dataset(path: &Path, dataset: &TaskDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &dataset.header)?;
    w.write_all(b"\n").map_err(io)?;
    for t in &dataset.tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<TaskDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse { path: path.display().to_string(), line, message };
    let mut header = None;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: DatasetHeader = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            if h.schema_version != SCHEMA_VERSION {
                return Err(parse_err(lineno, format!("unsupported schema version {}", h.schema_version)));
            }
            header = Some(h);
            continue;
        }
        let t: Task = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if t.bases.len() != t.k || t.q1.len() != t.k || t.q2.len() != t.k || t.q3.len() != t.k {
            return Err(parse_err(lineno, format!("task {} has inconsistent arm count", t.id)));
        }
        tasks.push(t);
    }
    Ok(TaskDataset { header: header.unwrap_or_else(|| TaskDataset::empty(TaskMode::Static, 0).header), tasks })
}

/// Arm count for task `id` when counts are split evenly over `k_range`.
pub fn arm_count_for(id: u64, k_range: (usize, usize)) -> usize {
    let span = (k_range.1 - k_range.0 + 1) as u64;
    k_range.0 + (id % span) as usize
}

/// Generates `count` tasks; task `id` uses its own RNG stream derived from
/// `(seed, id)`, so the result does not depend on `workers`.
pub fn generate_dataset(
    arm: &Arc<ArmModel>,
    seed: u64,
    count: usize,
    k_range: (usize, usize),
    mode: TaskMode,
    params: &TaskGenParams,
    workers: usize,
) -> Result<TaskDataset> {
    if k_range.0 == 0 || k_range.0 > k_range.1 {
        return Err(Error::Config(format!("invalid arm-count range {k_range:?}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let tasks = pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|id| {
                let mut rng = child_rng(seed, id);
                let mut t = generate_task(arm, arm_count_for(id, k_range), mode, params, &mut rng)?;
                t.id = id;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut ds = TaskDataset::empty(mode, seed);
    ds.tasks = tasks;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn ur5() -> Arc<ArmModel> {
        Arc::new(ArmModel::ur5())
    }

    #[test]
    fn single_base_in_square() {
        let p = TaskGenParams::default();
        let b = sample_base_poses(1, &p, &mut rng_from(1)).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b[0].position.x.abs() <= 0.45 && b[0].position.y.abs() <= 0.45);
        assert_eq!(b[0].position.z, 0.0);
    }

    #[test]
    fn base_count_bounds() {
        let p = TaskGenParams::default();
        assert!(sample_base_poses(0, &p, &mut rng_from(1)).is_err());
        assert!(sample_base_poses(17, &p, &mut rng_from(1)).is_err());
        let tight = TaskGenParams { min_base_distance: 10.0, ..p };
        assert!(matches!(sample_base_poses(2, &tight, &mut rng_from(1)), Err(Error::Generation(_))));
    }

    #[test]
    fn difficulty_extremes() {
        let r = [0.85, 0.85];
        assert_eq!(base_difficulty(&[Pose::identity()], &r[..1]), 0.0);
        assert_eq!(base_difficulty(&[Pose::identity(), Pose::planar(1.8, 0.0, 0.0, 0.0)], &r), 0.0);
        assert_eq!(base_difficulty(&[Pose::identity(), Pose::planar(0.0, 0.0, 0.0, 1.0)], &r), 1.0);
    }

    #[test]
    fn difficulty_symmetric_for_two_arms() {
        let a = Pose::planar(0.1, -0.2, 0.0, 0.0);
        let b = Pose::planar(0.7, 0.3, 0.0, 2.0);
        let r = [0.85, 0.85];
        assert_eq!(base_difficulty(&[a, b], &r), base_difficulty(&[b, a], &r));
    }

    #[test]
    fn generated_task_is_consistent() {
        let arm = ur5();
        let p = TaskGenParams::default();
        let t = generate_task(&arm, 2, TaskMode::Dynamic, &p, &mut rng_from(5)).unwrap();
        assert_eq!(t.k, 2);
        let s = t.speed.unwrap();
        assert!((0.01..=0.15).contains(&s));
        let world = t.world(&arm).unwrap();
        for q in [&t.q1, &t.q2, &t.q3] {
            assert!(!world.in_collision(q).unwrap());
        }
        let again = generate_task(&arm, 2, TaskMode::Dynamic, &p, &mut rng_from(5)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn dynamic_targets_endpoints() {
        let arm = ur5();
        let p = TaskGenParams::default();
        let t = generate_task(&arm, 1, TaskMode::Dynamic, &p, &mut rng_from(9)).unwrap();
        let d = DynamicTargets::new(&t, &arm, p.dt).unwrap();
        let start = d.at(0);
        assert!(start[0].position_distance(&t.static_targets(&arm)[0]) < 1e-12);
        let end = d.at(10_000_000);
        let fk3 = t.bases[0].compose(&arm.fk_unchecked(&t.q3[0]).ee_pose);
        assert!(end[0].position_distance(&fk3) < 1e-12);
        let stat = generate_task(&arm, 1, TaskMode::Static, &p, &mut rng_from(9)).unwrap();
        assert!(DynamicTargets::new(&stat, &arm, p.dt).is_err());
        assert!(dynamic_target(&t, &arm, 11, 10, p.dt).is_err());
    }

    #[test]
    fn arm_counts_split_evenly() {
        let counts: Vec<usize> = (0..6).map(|i| arm_count_for(i, (1, 3))).collect();
        assert_eq!(counts, vec![1, 2, 3, 1, 2, 3]);
    }
}
