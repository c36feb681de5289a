//! Training loop: SAC with expert injection on failed episodes, the tolerance
//! curriculum, behavior cloning and the ablation presets.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::birrt::{to_actions, ExpertRecord};
use crate::env::{
    collect_episode, Action, ActionSource, EnvConfig, Episode, MultiArmEnv, ObservationSequence, RewardScheme,
    ScriptedActions, Transition, ACTION_DIM,
};
use crate::error::{Error, Result};
use crate::kinematics::ArmModel;
use crate::neural::{policy_distributions, Adam, Network, SeqBatch};
use crate::sac::{bc_loss_grad, Losses, Provenance, ReplayBuffer, SacBatch, SacConfig, SacState};
use crate::seed::{child_rng, child_seed, rng_from, Rng64};
use crate::taskgen::Task;

pub const GRADUATION_RATE: f64 = 0.7;
pub const GRADUATION_WINDOW: usize = 100;
/// A policy step counts as standing still when every normalized action
/// component is below this magnitude.
pub const NEAR_ZERO_ACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumLevel {
    pub level: usize,
    /// Metres.
    pub position_tolerance: f64,
    /// Radians.
    pub orientation_tolerance: f64,
}

const LEVELS_CM_RAD: [(f64, f64); 22] = [
    (10.0, 0.20),
    (8.0, 0.16),
    (6.0, 0.14),
    (4.0, 0.10),
    (3.6, 0.09),
    (3.2, 0.08),
    (2.8, 0.07),
    (2.6, 0.06),
    (2.4, 0.05),
    (2.2, 0.05),
    (2.1, 0.05),
    (2.0, 0.05),
    (1.9, 0.05),
    (1.8, 0.05),
    (1.7, 0.05),
    (1.6, 0.05),
    (1.5, 0.05),
    (1.4, 0.05),
    (1.3, 0.05),
    (1.2, 0.05),
    (1.1, 0.05),
    (1.0, 0.05),
];

pub fn curriculum_levels() -> Vec<CurriculumLevel> {
    LEVELS_CM_RAD
        .iter()
        .enumerate()
        .map(|(i, &(cm, rad))| CurriculumLevel { level: i + 1, position_tolerance: cm / 100.0, orientation_tolerance: rad })
        .collect()
}

/// Tracks the current level and the trailing success window.
#[derive(Debug, Clone)]
pub struct Curriculum {
    levels: Vec<CurriculumLevel>,
    index: usize,
    window: VecDeque<bool>,
}

impl Curriculum {
    /// Levels 1..=`max_level` of the standard table.
    pub fn new(max_level: usize) -> Result<Self> {
        let all = curriculum_levels();
        if max_level == 0 || max_level > all.len() {
            return Err(Error::Config(format!("max_level must be in 1..={}", all.len())));
        }
        Ok(Curriculum { levels: all[..max_level].to_vec(), index: 0, window: VecDeque::new() })
    }

    pub fn current(&self) -> CurriculumLevel {
        self.levels[self.index]
    }

    pub fn is_final(&self) -> bool {
        self.index + 1 == self.levels.len()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Mean success over the window, 0 when empty.
    pub fn trailing_success(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        self.window.iter().filter(|s| **s).count() as f64 / self.window.len() as f64
    }

    /// Records one episode; returns true on graduation, which clears the window.
    pub fn record(&mut self, success: bool) -> bool {
        if self.window.len() == GRADUATION_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(success);
        let full = self.window.len() == GRADUATION_WINDOW;
        if full && !self.is_final() && self.trailing_success() >= GRADUATION_RATE {
            self.index += 1;
            self.window.clear();
            return true;
        }
        false
    }
}

/// Samples or takes the mean action of a shared policy for every arm.
pub struct PolicyActor<'a> {
    policy: &'a Network,
    rng: Option<Rng64>,
    /// Steps where the chosen action was near zero, and all steps.
    pub near_zero: usize,
    pub steps: usize,
    error: Option<Error>,
}

impl<'a> PolicyActor<'a> {
    pub fn stochastic(policy: &'a Network, rng: Rng64) -> Self {
        PolicyActor { policy, rng: Some(rng), near_zero: 0, steps: 0, error: None }
    }

    pub fn deterministic(policy: &'a Network) -> Self {
        PolicyActor { policy, rng: None, near_zero: 0, steps: 0, error: None }
    }

    /// First forward error, if any step failed.
    pub fn take_error(&mut self) -> Option<Error> {
        self.error.take()
    }
}

impl ActionSource for PolicyActor<'_> {
    fn act(&mut self, observations: &[Arc<ObservationSequence>], _step: usize) -> Vec<Action> {
        let seqs: Vec<&ObservationSequence> = observations.iter().map(|o| o.as_ref()).collect();
        let dists = match policy_distributions(self.policy, &seqs) {
            Ok(d) => d,
            Err(e) => {
                self.error.get_or_insert(e);
                return vec![[0.0; ACTION_DIM]; observations.len()];
            }
        };
        dists
            .iter()
            .map(|d| {
                let a = match self.rng.as_mut() {
                    Some(rng) => d.sample(rng).0,
                    None => d.deterministic(),
                };
                self.steps += 1;
                if a.iter().all(|v| v.abs() < NEAR_ZERO_ACTION) {
                    self.near_zero += 1;
                }
                a
            })
            .collect()
    }
}

/// Normalized per-arm expert actions, `[arm][step]`.
pub fn expert_actions(record: &ExpertRecord, action_scale: f64) -> Result<Option<Vec<Vec<Action>>>> {
    Ok(record.trajectory()?.map(|t| to_actions(&t, action_scale)))
}

/// Replays expert actions in the environment.
pub fn replay_expert(env: &mut MultiArmEnv, task: &Task, deltas: &[Vec<Action>]) -> Result<Episode> {
    let mut source = ScriptedActions::new(deltas.to_vec(), env.config().action_scale);
    collect_episode(env, task, &mut source, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Ours,
    NoExpert,
    Selfish,
    Individualistic,
    BehaviorCloning,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Ours, Ablation::NoExpert, Ablation::BehaviorCloning, Ablation::Selfish, Ablation::Individualistic];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Ours => "ours",
            Ablation::NoExpert => "no-expert",
            Ablation::Selfish => "selfish",
            Ablation::Individualistic => "individualistic",
            Ablation::BehaviorCloning => "bc",
        }
    }

    /// Applies this preset to a base configuration.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Ablation::Ours | Ablation::BehaviorCloning => {}
            Ablation::NoExpert => c.use_expert = false,
            Ablation::Selfish => c.env.reward_scheme = RewardScheme::Selfish,
            Ablation::Individualistic => c.env.observe_others = false,
        }
        c
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sac: SacConfig,
    /// Tolerances are overwritten by the curriculum level.
    pub env: EnvConfig,
    pub use_expert: bool,
    pub total_env_steps: usize,
    /// Highest curriculum level reachable.
    pub max_level: usize,
    /// Parallel rollouts per round against one parameter snapshot.
    pub workers: usize,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sac: SacConfig::default(),
            env: EnvConfig::default(),
            use_expert: true,
            total_env_steps: 1_000_000,
            max_level: LEVELS_CM_RAD.len(),
            workers: 1,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub env_steps: usize,
    pub level: usize,
    pub trailing100_success: f64,
    pub actor_loss: Option<f64>,
    pub q_loss: Option<f64>,
    pub alpha: f64,
    pub expert_injections: usize,
    pub success: bool,
    pub injected: bool,
    pub near_zero_action_frac: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: SacState,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: usize,
    pub final_level: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Highest trailing success seen over a full window.
    pub fn best_full_window_success(&self) -> f64 {
        let mut best: f64 = 0.0;
        let mut window: VecDeque<bool> = VecDeque::new();
        let mut level = 0;
        for m in &self.metrics {
            if m.level != level {
                window.clear();
                level = m.level;
            }
            window.push_back(m.success);
            if window.len() > GRADUATION_WINDOW {
                window.pop_front();
            }
            if window.len() == GRADUATION_WINDOW {
                best = best.max(window.iter().filter(|s| **s).count() as f64 / GRADUATION_WINDOW as f64);
            }
        }
        best
    }
}

struct Rollout {
    policy: Episode,
    near_zero: usize,
    policy_steps: usize,
    expert: Option<Episode>,
}

fn rollout(
    arm: &Arc<ArmModel>,
    env_config: EnvConfig,
    policy: &Network,
    task: &Task,
    expert: Option<&Vec<Vec<Action>>>,
    rng: Rng64,
) -> Result<Rollout> {
    let mut env = MultiArmEnv::new(arm.clone(), env_config)?;
    let mut actor = PolicyActor::stochastic(policy, rng);
    let episode = collect_episode(&mut env, task, &mut actor, false)?;
    if let Some(e) = actor.take_error() {
        return Err(e);
    }
    let expert = match expert {
        Some(deltas) if !episode.success => Some(replay_expert(&mut env, task, deltas)?),
        _ => None,
    };
    Ok(Rollout { policy: episode, near_zero: actor.near_zero, policy_steps: actor.steps, expert })
}

fn push_episode(buffer: &mut ReplayBuffer, episode: &Episode, provenance: Provenance) {
    // Interleave arms step by step so eviction order follows time.
    let steps = episode.transitions.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..steps {
        for arm in &episode.transitions {
            if let Some(tr) = arm.get(t) {
                buffer.push(tr.clone(), provenance);
            }
        }
    }
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse { path: path.display().to_string(), line: i + 2, message: e.to_string() })
        })
        .collect()
}

/// Trains a shared policy on `tasks`. With `out_dir`, writes `metrics.csv`
/// and checkpoints there.
pub fn run_training(
    tasks: &[Task],
    experts: &[ExpertRecord],
    arm: &Arc<ArmModel>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.sac.validate()?;
    config.env.validate()?;
    if tasks.is_empty() {
        return Err(Error::Usage("training needs at least one task".into()));
    }
    if config.use_expert && experts.is_empty() {
        return Err(Error::Usage("no expert records; pass the no-expert ablation explicitly".into()));
    }
    let mut curriculum = Curriculum::new(config.max_level)?;
    let expert_map: HashMap<u64, Vec<Vec<Action>>> = if config.use_expert {
        let mut m = HashMap::new();
        for r in experts {
            if let Some(a) = expert_actions(r, config.env.action_scale)? {
                m.insert(r.id, a);
            }
        }
        m
    } else {
        HashMap::new()
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = rng_from(config.seed);
    let mut state = SacState::new(config.sac.clone(), &mut child_rng(config.seed, 1))?;
    let mut update_rng = child_rng(config.seed, 2);
    let mut buffer = ReplayBuffer::new(config.sac.replay_capacity);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let ready = config.sac.batch_size.max(config.sac.warmup_steps);

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut env_steps = 0usize;
    let mut episode = 0usize;
    let mut injections = 0usize;
    let mut pending_updates = 0.0f64;
    let mut last: Option<Losses> = None;

    while env_steps < config.total_env_steps {
        let level = curriculum.current();
        let env_config =
            config.env.with_tolerances(level.position_tolerance, level.orientation_tolerance);
        let jobs: Vec<(usize, usize)> = (0..config.workers.max(1))
            .map(|w| (episode + w, rng.random_range(0..tasks.len())))
            .collect();
        let snapshot = state.policy.clone();
        let results: Vec<Rollout> = pool.install(|| {
            jobs.par_iter()
                .map(|&(ep, ti)| {
                    let task = &tasks[ti];
                    let seed = child_seed(config.seed, 1000 + ep as u64);
                    rollout(arm, env_config, &snapshot, task, expert_map.get(&task.id), rng_from(seed))
                })
                .collect::<Result<_>>()
        })?;

        for r in results {
            let mut steps = r.policy.steps;
            push_episode(&mut buffer, &r.policy, Provenance::Policy);
            let injected = r.expert.is_some();
            if let Some(e) = &r.expert {
                push_episode(&mut buffer, e, Provenance::Expert);
                steps += e.steps;
                injections += 1;
            }
            env_steps += steps;
            episode += 1;
            curriculum.record(r.policy.success);

            if buffer.len() >= ready {
                pending_updates += steps as f64 * config.sac.updates_per_step;
                while pending_updates >= 1.0 {
                    pending_updates -= 1.0;
                    let items = buffer.sample(config.sac.batch_size, &mut update_rng)?;
                    let refs: Vec<&Transition> = items.iter().map(|s| &s.transition).collect();
                    let batch = SacBatch::from_transitions(&refs)?;
                    last = Some(state.update(&batch, &mut update_rng)?);
                }
            }

            metrics.push(MetricsRow {
                episode,
                env_steps,
                level: level.level,
                trailing100_success: curriculum.trailing_success(),
                actor_loss: last.map(|l| l.actor),
                q_loss: last.map(|l| 0.5 * (l.q1 + l.q2)),
                alpha: state.alpha(),
                expert_injections: injections,
                success: r.policy.success,
                injected,
                near_zero_action_frac: if r.policy_steps == 0 {
                    0.0
                } else {
                    r.near_zero as f64 / r.policy_steps as f64
                },
            });
            if let Some(dir) = out_dir {
                if config.checkpoint_every > 0 && episode % config.checkpoint_every == 0 {
                    let p = dir.join(format!("checkpoint_{episode:08}.json"));
                    state.checkpoint().save(&p)?;
                    checkpoints.push(p);
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        let p = dir.join("checkpoint.json");
        state.checkpoint().save(&p)?;
        checkpoints.push(p);
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
    }
    Ok(TrainOutcome { state, metrics, env_steps, final_level: curriculum.current().level, checkpoints })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { epochs: 20, lr: 0.0005, batch_size: 256, seed: 0 }
    }
}

/// Observation and normalized action pairs from replaying every expert
/// trajectory in the environment.
pub fn expert_pairs(
    tasks: &[Task],
    experts: &[ExpertRecord],
    arm: &Arc<ArmModel>,
    env_config: EnvConfig,
) -> Result<Vec<(Arc<ObservationSequence>, Action)>> {
    let by_id: HashMap<u64, &Task> = tasks.iter().map(|t| (t.id, t)).collect();
    let mut env = MultiArmEnv::new(arm.clone(), env_config)?;
    let mut out = Vec::new();
    for r in experts {
        let (Some(task), Some(deltas)) = (by_id.get(&r.id), expert_actions(r, env_config.action_scale)?) else {
            continue;
        };
        let ep = replay_expert(&mut env, task, &deltas)?;
        for arm in &ep.transitions {
            out.extend(arm.iter().map(|t| (t.observation.clone(), t.action)));
        }
    }
    Ok(out)
}

/// Fits the policy mean and spread to expert actions by maximum likelihood.
/// Returns the trained policy and the mean loss of every epoch.
pub fn behavior_clone(
    policy: &Network,
    pairs: &[(Arc<ObservationSequence>, Action)],
    config: &BcConfig,
) -> Result<(Network, Vec<f64>)> {
    let mut net = policy.clone();
    if config.epochs == 0 {
        return Ok((net, Vec::new()));
    }
    if pairs.is_empty() {
        return Err(Error::Usage("behavior cloning needs at least one expert pair".into()));
    }
    let mut opt = Adam::new(net.params.len(), config.lr);
    let mut rng = rng_from(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let seqs: Vec<&ObservationSequence> = chunk.iter().map(|&i| pairs[i].0.as_ref()).collect();
            let obs = SeqBatch::from_observations(&seqs)?;
            let mut actions = Array2::zeros((chunk.len(), ACTION_DIM));
            for (r, &i) in chunk.iter().enumerate() {
                for j in 0..ACTION_DIM {
                    actions[(r, j)] = pairs[i].1[j];
                }
            }
            let (loss, grad) = bc_loss_grad(&net, &obs, &actions.view())?;
            opt.step(&mut net.params, &grad);
            total += loss * chunk.len() as f64;
        }
        history.push(total / pairs.len() as f64);
    }
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ArmState;
    use crate::neural::{init_policy, policy_forward, NetShape};

    #[test]
    fn table_has_22_levels_from_10cm_to_1cm() {
        let l = curriculum_levels();
        assert_eq!(l.len(), 22);
        assert_eq!((l[0].position_tolerance, l[0].orientation_tolerance), (0.10, 0.20));
        assert_eq!((l[21].position_tolerance, l[21].orientation_tolerance), (0.01, 0.05));
        for w in l.windows(2) {
            assert!(w[1].position_tolerance <= w[0].position_tolerance);
            assert!(w[1].orientation_tolerance <= w[0].orientation_tolerance);
        }
    }

    #[test]
    fn graduation_needs_a_full_window_at_70_percent() {
        let mut c = Curriculum::new(22).unwrap();
        for i in 0..99 {
            assert!(!c.record(true), "graduated early at {i}");
        }
        assert!(c.record(true));
        assert_eq!(c.current().level, 2);
        assert_eq!(c.window_len(), 0);

        // 69 of 100 stays; one more success pushes out a failure and graduates.
        for i in 0..100 {
            assert!(!c.record(i >= 31));
        }
        assert_eq!(c.current().level, 2);
        assert!(c.record(true));
        assert_eq!(c.current().level, 3);
    }

    #[test]
    fn final_level_never_advances() {
        let mut c = Curriculum::new(1).unwrap();
        for _ in 0..300 {
            assert!(!c.record(true));
        }
        assert_eq!(c.current().level, 1);
        assert_eq!(c.trailing_success(), 1.0);
    }

    fn fixed_sequence(v: f64) -> Arc<ObservationSequence> {
        let mut s = [0.0; crate::env::STATE_DIM];
        for (i, x) in s.iter_mut().enumerate() {
            *x = v * ((i % 7) as f64 - 3.0) / 3.0;
        }
        Arc::new(ObservationSequence { states: vec![ArmState(s)], arms: vec![0] })
    }

    #[test]
    fn cloning_a_single_pair_converges_to_its_action() {
        let shape = NetShape::policy(8, &[16, 16]);
        let policy = init_policy(shape, &mut rng_from(3));
        let target = [0.3, -0.5, 0.1, 0.0, 0.7, -0.2];
        let pairs = vec![(fixed_sequence(0.4), target)];
        let cfg = BcConfig { epochs: 2000, lr: 0.0005, batch_size: 1, seed: 1 };
        let (net, losses) = behavior_clone(&policy, &pairs, &cfg).unwrap();
        let d = policy_forward(&net, &pairs[0].0).unwrap();
        for (a, b) in d.deterministic().iter().zip(target) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let policy = init_policy(NetShape::policy(4, &[8]), &mut rng_from(5));
        let (net, losses) = behavior_clone(&policy, &[], &BcConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(net.params, policy.params);
        assert!(losses.is_empty());
    }

    #[test]
    fn boundary_actions_give_finite_loss() {
        let policy = init_policy(NetShape::policy(4, &[8]), &mut rng_from(5));
        let pairs = vec![(fixed_sequence(0.2), [1.0, -1.0, 1.0, -1.0, 0.0, 1.0])];
        let (net, losses) =
            behavior_clone(&policy, &pairs, &BcConfig { epochs: 3, lr: 1e-3, batch_size: 1, seed: 0 }).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(net.params.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        let base = TrainConfig::default();
        assert!(!Ablation::NoExpert.configure(&base).use_expert);
        assert!(!Ablation::Individualistic.configure(&base).env.observe_others);
        assert_eq!(Ablation::Selfish.configure(&base).env.reward_scheme, RewardScheme::Selfish);
        assert_eq!(Ablation::Ours.configure(&base), base);
    }
}
