//! Kinematic multi-arm reaching environment.
//!
//! Every arm observes a sequence of per-arm state vectors (its neighbors
//! within the observation radius, farthest first, itself last), expressed in
//! its own base frame. Joint positions are teleported each step after the
//! swept motion has been checked for collisions.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::collision::{first_collision_on_segment, World};
use crate::error::{Error, Result};
use crate::kinematics::{ArmModel, JointConfig, Pose, DOF, LINK_COUNT};
use crate::taskgen::{DynamicTargets, Task, TaskMode};

pub const STATE_DIM: usize = 7 + 2 * 7 + 2 * 3 * LINK_COUNT + 2 * DOF + 2 * 7;
pub const ACTION_DIM: usize = DOF;

pub const TEAM_REWARD: f64 = 1.0;
pub const REACH_REWARD: f64 = 0.01;
pub const SELFISH_REACH_REWARD: f64 = 0.1;
pub const COLLISION_PENALTY: f64 = -0.05;

/// Offsets of each block inside a state vector.
pub mod layout {
    pub const BASE: usize = 0;
    pub const EE: usize = 7;
    pub const LINKS: usize = 21;
    pub const JOINTS: usize = 81;
    pub const TARGET: usize = 93;
}

pub type Action = [f64; ACTION_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardScheme {
    Team,
    Selfish,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    pub max_steps: usize,
    pub observation_radius: f64,
    pub action_scale: f64,
    pub reward_scheme: RewardScheme,
    pub observe_others: bool,
    pub action_delay_steps: usize,
    pub dt: f64,
    /// Joint-space resolution of the swept collision check, rad.
    pub collision_resolution: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            position_tolerance: 0.02,
            orientation_tolerance: 0.1,
            max_steps: 500,
            observation_radius: 0.85,
            action_scale: 0.5,
            reward_scheme: RewardScheme::Team,
            observe_others: true,
            action_delay_steps: 1,
            dt: 1.0 / 240.0,
            collision_resolution: 0.05,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.position_tolerance > 0.0)
            || !(self.orientation_tolerance > 0.0)
            || self.max_steps == 0
            || !(self.action_scale > 0.0)
            || !(self.observation_radius >= 0.0)
            || !(self.collision_resolution > 0.0)
        {
            return Err(Error::Config(format!("invalid environment configuration {self:?}")));
        }
        Ok(())
    }

    pub fn with_tolerances(mut self, position: f64, orientation: f64) -> Self {
        self.position_tolerance = position;
        self.orientation_tolerance = orientation;
        self
    }
}

/// One arm's 107-number state vector.
#[derive(Clone, PartialEq)]
pub struct ArmState(pub [f64; STATE_DIM]);

impl std::fmt::Debug for ArmState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("ArmState").field(&&self.0[..]).finish()
    }
}

impl ArmState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Base position of the described arm relative to the observer.
    pub fn base_position(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    /// The current-frame half of a block of `width` numbers at `offset`.
    pub fn current(&self, offset: usize, width: usize) -> &[f64] {
        &self.0[offset..offset + width]
    }

    pub fn previous(&self, offset: usize, width: usize) -> &[f64] {
        &self.0[offset + width..offset + 2 * width]
    }
}

/// Observation of one arm. `arms[i]` is the world index of `states[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence {
    pub states: Vec<ArmState>,
    pub arms: Vec<usize>,
}

impl ObservationSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: Arc<ObservationSequence>,
    pub action: Action,
    pub reward: f64,
    pub next_observation: Arc<ObservationSequence>,
    /// Terminal (collision or all reached); a timeout is not terminal.
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frame {
    ee: Pose,
    links: [Vector3<f64>; LINK_COUNT],
    joints: JointConfig,
    target: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: usize,
    pub reached: Vec<bool>,
    pub all_reached: bool,
    pub collided_arms: Vec<usize>,
    pub timeout: bool,
    /// Actions actually applied this step, after the delay queue.
    pub applied: Vec<Action>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observations: Vec<Arc<ObservationSequence>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

pub struct MultiArmEnv {
    arm: Arc<ArmModel>,
    config: EnvConfig,
    world: Option<World>,
    task_id: u64,
    bases: Vec<Pose>,
    q: Vec<JointConfig>,
    current: Vec<Frame>,
    previous: Vec<Frame>,
    dynamic: Option<DynamicTargets>,
    static_targets: Vec<Pose>,
    reached: Vec<bool>,
    step: usize,
    done: bool,
    success: bool,
    queue: VecDeque<Vec<Action>>,
    neighbors: Vec<Vec<usize>>,
}

impl MultiArmEnv {
    pub fn new(arm: Arc<ArmModel>, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(MultiArmEnv {
            arm,
            config,
            world: None,
            task_id: 0,
            bases: Vec::new(),
            q: Vec::new(),
            current: Vec::new(),
            previous: Vec::new(),
            dynamic: None,
            static_targets: Vec::new(),
            reached: Vec::new(),
            step: 0,
            done: true,
            success: false,
            queue: VecDeque::new(),
            neighbors: Vec::new(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: EnvConfig) -> Result<()> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn arm_count(&self) -> usize {
        self.q.len()
    }

    pub fn joint_configs(&self) -> &[JointConfig] {
        &self.q
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn reached(&self) -> &[bool] {
        &self.reached
    }

    pub fn world(&self) -> Option<&World> {
        self.world.as_ref()
    }

    /// World-frame targets for the current step.
    pub fn targets(&self) -> Vec<Pose> {
        self.current.iter().map(|f| f.target).collect()
    }

    pub fn reset(&mut self, task: &Task) -> Result<Vec<Arc<ObservationSequence>>> {
        let k = task.k;
        if task.bases.len() != k || task.q1.len() != k || task.q2.len() != k || task.q3.len() != k {
            return Err(Error::Arity { expected: k, got: task.bases.len() });
        }
        let world = task.world(&self.arm)?;
        for q in &task.q1 {
            self.arm.check_limits(q)?;
        }
        self.dynamic = match task.mode {
            TaskMode::Static => None,
            TaskMode::Dynamic => Some(DynamicTargets::new(task, &self.arm, self.config.dt)?),
        };
        self.static_targets = task.static_targets(&self.arm);
        self.task_id = task.id;
        self.bases = task.bases.clone();
        self.q = task.q1.clone();
        self.step = 0;
        let targets = self.targets_at(0);
        self.current = (0..k).map(|i| self.frame(i, targets[i])).collect();
        self.previous = self.current.clone();
        self.reached = (0..k).map(|i| self.is_reached(i)).collect();
        self.success = self.reached.iter().all(|r| *r);
        self.done = self.success;
        self.queue = std::iter::repeat_n(vec![[0.0; ACTION_DIM]; k], self.config.action_delay_steps).collect();
        self.neighbors = self.neighbor_lists();
        self.world = Some(world);
        Ok(self.observations())
    }

    fn targets_at(&self, step: usize) -> Vec<Pose> {
        match &self.dynamic {
            Some(d) => d.at(step),
            None => self.static_targets.clone(),
        }
    }

    fn frame(&self, i: usize, target: Pose) -> Frame {
        let fk = self.arm.fk_unchecked(&self.q[i]).transformed(&self.bases[i]);
        Frame { ee: fk.ee_pose, links: fk.link_origins, joints: self.q[i], target }
    }

    fn is_reached(&self, i: usize) -> bool {
        let f = &self.current[i];
        f.ee.position_distance(&f.target) <= self.config.position_tolerance
            && f.ee.orientation_distance(&f.target) <= self.config.orientation_tolerance
    }

    /// Observed arms per observer: farthest base first, self last.
    fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let k = self.bases.len();
        (0..k)
            .map(|i| {
                let mut others: Vec<(f64, usize)> = if self.config.observe_others {
                    (0..k)
                        .filter(|&j| j != i)
                        .map(|j| (self.bases[i].position_distance(&self.bases[j]), j))
                        .filter(|(d, _)| *d <= self.config.observation_radius)
                        .collect()
                } else {
                    Vec::new()
                };
                others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                others.into_iter().map(|(_, j)| j).chain(std::iter::once(i)).collect()
            })
            .collect()
    }

    /// State of arm `subject` as seen from the base frame of arm `observer`.
    pub fn arm_state_from(&self, observer: usize, subject: usize) -> ArmState {
        let frame = self.bases[observer].to_isometry().inverse();
        let rel_pose = |p: &Pose| Pose::from_isometry(&(frame * p.to_isometry())).to_array();
        let rel_point = |p: &Vector3<f64>| frame.transform_point(&(*p).into()).coords;
        let mut s = [0.0; STATE_DIM];
        let (cur, prev) = (&self.current[subject], &self.previous[subject]);
        s[layout::BASE..layout::BASE + 7].copy_from_slice(&rel_pose(&self.bases[subject]));
        for (h, f) in [cur, prev].into_iter().enumerate() {
            s[layout::EE + 7 * h..layout::EE + 7 * (h + 1)].copy_from_slice(&rel_pose(&f.ee));
            for (l, p) in f.links.iter().enumerate() {
                let o = layout::LINKS + 3 * LINK_COUNT * h + 3 * l;
                s[o..o + 3].copy_from_slice(rel_point(p).as_slice());
            }
            s[layout::JOINTS + DOF * h..layout::JOINTS + DOF * (h + 1)].copy_from_slice(&f.joints.0);
            s[layout::TARGET + 7 * h..layout::TARGET + 7 * (h + 1)].copy_from_slice(&rel_pose(&f.target));
        }
        ArmState(s)
    }

    /// The observing arm's own state.
    pub fn build_arm_state(&self, arm_index: usize) -> ArmState {
        self.arm_state_from(arm_index, arm_index)
    }

    pub fn observation(&self, i: usize) -> ObservationSequence {
        let arms = self.neighbors[i].clone();
        ObservationSequence { states: arms.iter().map(|&j| self.arm_state_from(i, j)).collect(), arms }
    }

    pub fn observations(&self) -> Vec<Arc<ObservationSequence>> {
        (0..self.q.len()).map(|i| Arc::new(self.observation(i))).collect()
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; call reset first".into()));
        }
        let k = self.q.len();
        if actions.len() != k {
            return Err(Error::Arity { expected: k, got: actions.len() });
        }
        if let Some(bad) = actions.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("non-finite action component {bad}")));
        }
        let clipped: Vec<Action> = actions.iter().map(|a| a.map(|v| v.clamp(-1.0, 1.0))).collect();
        self.queue.push_back(clipped);
        let applied = self.queue.pop_front().expect("queue holds at least the pushed action");

        let proposed: Vec<JointConfig> = self
            .q
            .iter()
            .zip(&applied)
            .map(|(q, a)| {
                let mut next = q.0;
                for (v, d) in next.iter_mut().zip(a) {
                    *v += self.config.action_scale * d;
                }
                self.arm.clamp_to_limits(&JointConfig(next))
            })
            .collect();
        let world = self.world.as_ref().expect("reset initializes the world");
        let hit = first_collision_on_segment(world, &self.q, &proposed, self.config.collision_resolution)?;
        let (next_q, collided_arms) = match hit {
            Some((q, report)) => (q, report.colliding_arms()),
            None => (proposed, Vec::new()),
        };

        self.q = next_q;
        self.step += 1;
        let targets = self.targets_at(self.step);
        self.previous = std::mem::take(&mut self.current);
        self.current = (0..k).map(|i| self.frame(i, targets[i])).collect();
        let reached: Vec<bool> = (0..k).map(|i| self.is_reached(i)).collect();
        let all_reached = reached.iter().all(|r| *r);

        let mut rewards = vec![0.0; k];
        let collided = !collided_arms.is_empty();
        if collided {
            for &i in &collided_arms {
                rewards[i] += COLLISION_PENALTY;
            }
        } else {
            let edge = match self.config.reward_scheme {
                RewardScheme::Team => REACH_REWARD,
                RewardScheme::Selfish => SELFISH_REACH_REWARD,
            };
            for i in 0..k {
                if reached[i] && !self.reached[i] {
                    rewards[i] += edge;
                }
            }
            if all_reached && self.config.reward_scheme == RewardScheme::Team {
                for r in rewards.iter_mut() {
                    *r += TEAM_REWARD;
                }
            }
        }
        self.reached = reached.clone();
        self.success = !collided && all_reached;
        let timeout = !collided && !all_reached && self.step >= self.config.max_steps;
        self.done = collided || all_reached || timeout;

        Ok(StepResult {
            observations: self.observations(),
            rewards,
            done: self.done,
            info: StepInfo { step: self.step, reached, all_reached: self.success, collided_arms, timeout, applied },
        })
    }

    pub fn log_header(&self) -> LogRecord {
        LogRecord::Reset {
            task_id: self.task_id,
            bases: self.bases.clone(),
            q: self.q.clone(),
            targets: self.targets(),
            reached: self.reached.clone(),
            config: self.config,
        }
    }
}

/// Produces one action per arm from the current observations.
pub trait ActionSource {
    fn act(&mut self, observations: &[Arc<ObservationSequence>], step: usize) -> Vec<Action>;
}

impl<F: FnMut(&[Arc<ObservationSequence>], usize) -> Vec<Action>> ActionSource for F {
    fn act(&mut self, observations: &[Arc<ObservationSequence>], step: usize) -> Vec<Action> {
        self(observations, step)
    }
}

/// Replays precomputed per-arm radian deltas, then outputs zeros.
pub struct ScriptedActions {
    actions: Vec<Vec<Action>>,
    scale: f64,
}

impl ScriptedActions {
    /// `deltas[arm][step]` in radians; `scale` is the env action scale.
    pub fn new(deltas: Vec<Vec<Action>>, scale: f64) -> Self {
        ScriptedActions { actions: deltas, scale }
    }
}

impl ActionSource for ScriptedActions {
    fn act(&mut self, observations: &[Arc<ObservationSequence>], step: usize) -> Vec<Action> {
        (0..observations.len())
            .map(|i| {
                self.actions
                    .get(i)
                    .and_then(|s| s.get(step))
                    .map_or([0.0; ACTION_DIM], |a| a.map(|v| v / self.scale))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Reset {
        task_id: u64,
        bases: Vec<Pose>,
        q: Vec<JointConfig>,
        targets: Vec<Pose>,
        reached: Vec<bool>,
        config: EnvConfig,
    },
    Step {
        step: usize,
        actions: Vec<Action>,
        applied: Vec<Action>,
        q: Vec<JointConfig>,
        targets: Vec<Pose>,
        rewards: Vec<f64>,
        reached: Vec<bool>,
        collided_arms: Vec<usize>,
        done: bool,
        success: bool,
    },
}

#[derive(Debug, Clone)]
pub struct Episode {
    /// `transitions[arm]`, one entry per env step.
    pub transitions: Vec<Vec<Transition>>,
    pub success: bool,
    pub collided: bool,
    pub steps: usize,
    /// Per-arm undiscounted return.
    pub returns: Vec<f64>,
    pub log: Vec<LogRecord>,
}

impl Episode {
    pub fn transition_count(&self) -> usize {
        self.transitions.iter().map(Vec::len).sum()
    }
}

/// Runs one episode to termination.
pub fn collect_episode(
    env: &mut MultiArmEnv,
    task: &Task,
    source: &mut dyn ActionSource,
    keep_log: bool,
) -> Result<Episode> {
    let mut obs = env.reset(task)?;
    let k = env.arm_count();
    let mut log = Vec::new();
    if keep_log {
        log.push(env.log_header());
    }
    let mut transitions: Vec<Vec<Transition>> = vec![Vec::new(); k];
    let mut returns = vec![0.0; k];
    let mut collided = false;
    while !env.is_done() {
        let actions = source.act(&obs, env.step_count());
        if actions.len() != k {
            return Err(Error::Arity { expected: k, got: actions.len() });
        }
        let r = env.step(&actions)?;
        let terminal = r.done && !r.info.timeout;
        for i in 0..k {
            transitions[i].push(Transition {
                observation: obs[i].clone(),
                action: actions[i].map(|v| v.clamp(-1.0, 1.0)),
                reward: r.rewards[i],
                next_observation: r.observations[i].clone(),
                done: terminal,
            });
            returns[i] += r.rewards[i];
        }
        collided |= !r.info.collided_arms.is_empty();
        if keep_log {
            log.push(LogRecord::Step {
                step: r.info.step,
                actions: actions.clone(),
                applied: r.info.applied.clone(),
                q: env.joint_configs().to_vec(),
                targets: env.targets(),
                rewards: r.rewards.clone(),
                reached: r.info.reached.clone(),
                collided_arms: r.info.collided_arms.clone(),
                done: r.done,
                success: r.info.all_reached,
            });
        }
        obs = r.observations;
    }
    Ok(Episode { transitions, success: env.success(), collided, steps: env.step_count(), returns, log })
}

pub fn write_episode_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episode_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
