//! Soft actor-critic losses with analytic gradients, the replay buffer and
//! the update step.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ObservationSequence, Transition, ACTION_DIM};
use crate::error::{Error, Result};
use crate::neural::{
    init_policy, log_one_minus_tanh_sq, log_std_from_head, soft_update, Adam, Checkpoint, NetShape, Network, SeqBatch,
    CHECKPOINT_SCHEMA, LOG_STD_SLOPE,
};
use crate::seed::Rng64;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Expert actions are pulled this far inside (-1, 1) before the inverse squash.
pub const BC_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub actor_lr: f64,
    pub q_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub replay_capacity: usize,
    pub target_entropy: f64,
    pub initial_alpha: f64,
    /// Gradient steps per environment step once warm-up is over.
    pub updates_per_step: f64,
    pub policy_shape: NetShape,
    pub q_shape: NetShape,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            actor_lr: 0.0005,
            q_lr: 0.001,
            alpha_lr: 0.0003,
            gamma: 0.99,
            tau: 0.001,
            batch_size: 4096,
            warmup_steps: 20_000,
            replay_capacity: 50_000,
            target_entropy: -(ACTION_DIM as f64),
            initial_alpha: 1.0,
            updates_per_step: 1.0,
            policy_shape: NetShape::full_policy(),
            q_shape: NetShape::full_q(),
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.actor_lr, self.q_lr, self.alpha_lr, self.gamma, self.tau, self.initial_alpha];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.gamma > 1.0
            || self.tau > 1.0
            || self.batch_size == 0
            || self.replay_capacity < self.batch_size
            || !(self.updates_per_step >= 0.0)
        {
            return Err(Error::Config(format!("invalid SAC configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Policy,
    Expert,
}

#[derive(Debug, Clone)]
pub struct Stored {
    pub transition: Transition,
    pub provenance: Provenance,
}

/// FIFO ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Stored>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, transition: Transition, provenance: Provenance) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(Stored { transition, provenance });
    }

    pub fn get(&self, i: usize) -> Option<&Stored> {
        self.items.get(i)
    }

    /// `n` items drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Stored>> {
        if self.items.is_empty() {
            return Err(Error::Usage("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// Tensors for one update.
pub struct SacBatch {
    pub obs: SeqBatch,
    pub next_obs: SeqBatch,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub dones: Array1<f64>,
}

impl SacBatch {
    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        let obs: Vec<&ObservationSequence> = items.iter().map(|t| t.observation.as_ref()).collect();
        let next: Vec<&ObservationSequence> = items.iter().map(|t| t.next_observation.as_ref()).collect();
        let mut actions = Array2::zeros((items.len(), ACTION_DIM));
        for (i, t) in items.iter().enumerate() {
            for j in 0..ACTION_DIM {
                actions[(i, j)] = t.action[j];
            }
        }
        Ok(SacBatch {
            obs: SeqBatch::from_observations(&obs)?,
            next_obs: SeqBatch::from_observations(&next)?,
            actions,
            rewards: items.iter().map(|t| t.reward).collect(),
            dones: items.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }
}

pub fn standard_normal(rows: usize, rng: &mut Rng64) -> Array2<f64> {
    Array2::from_shape_fn((rows, ACTION_DIM), |_| rng.sample(StandardNormal))
}

/// Squashed samples from policy head outputs `z` (B x 12) with noise `eps`.
struct Squashed {
    actions: Array2<f64>,
    logp: Array1<f64>,
    sigma: Array2<f64>,
}

fn squash_rows(z: &Array2<f64>, eps: &ArrayView2<f64>) -> Squashed {
    let b = z.nrows();
    let mut actions = Array2::zeros((b, ACTION_DIM));
    let mut sigma = Array2::zeros((b, ACTION_DIM));
    let mut logp = Array1::zeros(b);
    for r in 0..b {
        for j in 0..ACTION_DIM {
            let ls = log_std_from_head(z[(r, ACTION_DIM + j)]);
            let sd = ls.exp();
            let e = eps[(r, j)];
            let u = z[(r, j)] + sd * e;
            actions[(r, j)] = u.tanh();
            sigma[(r, j)] = sd;
            logp[r] += -0.5 * e * e - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
    }
    Squashed { actions, logp, sigma }
}

/// Soft Bellman targets; no gradient flows through them.
#[allow(clippy::too_many_arguments)]
pub fn critic_targets(
    policy: &Network,
    q1_target: &Network,
    q2_target: &Network,
    batch: &SacBatch,
    eps_next: &ArrayView2<f64>,
    alpha: f64,
    gamma: f64,
) -> Result<Array1<f64>> {
    let z = policy.forward(&batch.next_obs, None)?;
    let sq = squash_rows(&z, eps_next);
    let a = sq.actions.view();
    let t1 = q1_target.forward(&batch.next_obs, Some(&a))?;
    let t2 = q2_target.forward(&batch.next_obs, Some(&a))?;
    Ok(Array1::from_shape_fn(batch.len(), |r| {
        let soft = t1[(r, 0)].min(t2[(r, 0)]) - alpha * sq.logp[r];
        batch.rewards[r] + gamma * (1.0 - batch.dones[r]) * soft
    }))
}

/// Mean squared Bellman error of one critic and its gradient.
pub fn critic_loss_grad(q: &Network, batch: &SacBatch, targets: &Array1<f64>) -> Result<(f64, Vec<f64>)> {
    critic_pass(q, batch, targets).map(|(l, g, _)| (l, g))
}

/// Like [`critic_loss_grad`], also returning the critic's encoding of `batch.obs`.
pub fn critic_pass(q: &Network, batch: &SacBatch, targets: &Array1<f64>) -> Result<(f64, Vec<f64>, Array2<f64>)> {
    let (emb, cache) = q.encode(&batch.obs)?;
    let head = q.head_forward(&emb.view(), Some(&batch.actions.view()))?;
    let pred = head.output();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut d = Array2::zeros((batch.len(), 1));
    for r in 0..batch.len() {
        let e = pred[(r, 0)] - targets[r];
        loss += e * e / n;
        d[(r, 0)] = 2.0 * e / n;
    }
    let mut grad = vec![0.0; q.params.len()];
    let d_in = q.head_backward(&head, &d.view(), Some(&mut grad));
    let hidden = q.shape.hidden;
    q.encode_backward(&batch.obs, &cache, &d_in.slice(s![.., ..hidden]), &mut grad);
    Ok((loss, grad, emb))
}

pub struct ActorResult {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub logp: Array1<f64>,
}

/// Entropy-regularized actor loss mean(alpha * log pi - min(Q1, Q2)) with
/// critic parameters held fixed; `q_embeddings` are the critics' encodings of
/// `batch.obs`.
pub fn actor_loss_grad(
    policy: &Network,
    critics: [&Network; 2],
    q_embeddings: [&Array2<f64>; 2],
    batch: &SacBatch,
    eps: &ArrayView2<f64>,
    alpha: f64,
) -> Result<ActorResult> {
    let n = batch.len();
    let bf = n as f64;
    let (h, enc) = policy.encode(&batch.obs)?;
    let head = policy.head_forward(&h.view(), None)?;
    let z = head.output();
    let sq = squash_rows(z, eps);
    let a = sq.actions.view();
    let h1 = critics[0].head_forward(&q_embeddings[0].view(), Some(&a))?;
    let h2 = critics[1].head_forward(&q_embeddings[1].view(), Some(&a))?;
    let (v1, v2) = (h1.output(), h2.output());

    let mut loss = 0.0;
    let mut d1 = Array2::zeros((n, 1));
    let mut d2 = Array2::zeros((n, 1));
    for r in 0..n {
        let (x, y) = (v1[(r, 0)], v2[(r, 0)]);
        loss += (alpha * sq.logp[r] - x.min(y)) / bf;
        if x <= y {
            d1[(r, 0)] = -1.0 / bf;
        } else {
            d2[(r, 0)] = -1.0 / bf;
        }
    }
    let hq = critics[0].shape.hidden;
    let da = critics[0].head_backward(&h1, &d1.view(), None).slice(s![.., hq..]).to_owned()
        + critics[1].head_backward(&h2, &d2.view(), None).slice(s![.., hq..]);

    let mut dz = Array2::zeros((n, 2 * ACTION_DIM));
    for r in 0..n {
        for j in 0..ACTION_DIM {
            let act = sq.actions[(r, j)];
            let g_u = alpha / bf * 2.0 * act + da[(r, j)] * (1.0 - act * act);
            dz[(r, j)] = g_u;
            let d_log_std = g_u * sq.sigma[(r, j)] * eps[(r, j)] - alpha / bf;
            dz[(r, ACTION_DIM + j)] = d_log_std * LOG_STD_SLOPE;
        }
    }
    let mut grad = vec![0.0; policy.params.len()];
    let dh = policy.head_backward(&head, &dz.view(), Some(&mut grad));
    policy.encode_backward(&batch.obs, &enc, &dh.view(), &mut grad);
    Ok(ActorResult { loss, grad, logp: sq.logp })
}

/// Temperature loss -mean(log_alpha * (log pi + target_entropy)) and its derivative.
pub fn temperature_loss_grad(log_alpha: f64, logp: &Array1<f64>, target_entropy: f64) -> (f64, f64) {
    let m = logp.iter().map(|l| l + target_entropy).sum::<f64>() / logp.len() as f64;
    (-log_alpha * m, -m)
}

/// Negative Gaussian log-likelihood of inverse-squashed expert actions.
pub fn bc_loss_grad(policy: &Network, obs: &SeqBatch, actions: &ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
    let n = obs.rows();
    let bf = n as f64;
    let (h, enc) = policy.encode(obs)?;
    let head = policy.head_forward(&h.view(), None)?;
    let z = head.output();
    let mut loss = 0.0;
    let mut dz = Array2::zeros((n, 2 * ACTION_DIM));
    for r in 0..n {
        for j in 0..ACTION_DIM {
            let u = actions[(r, j)].clamp(-1.0 + BC_CLIP, 1.0 - BC_CLIP).atanh();
            let ls = log_std_from_head(z[(r, ACTION_DIM + j)]);
            let inv = (-ls).exp();
            let k = (u - z[(r, j)]) * inv;
            loss += (0.5 * k * k + ls + HALF_LN_2PI) / bf;
            dz[(r, j)] = -k * inv / bf;
            dz[(r, ACTION_DIM + j)] = (1.0 - k * k) / bf * LOG_STD_SLOPE;
        }
    }
    let mut grad = vec![0.0; policy.params.len()];
    let dh = policy.head_backward(&head, &dz.view(), Some(&mut grad));
    policy.encode_backward(obs, &enc, &dh.view(), &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub actor: f64,
    pub q1: f64,
    pub q2: f64,
    pub temperature: f64,
    pub alpha: f64,
}

/// Networks, optimizers and temperature of one learner.
#[derive(Debug, Clone)]
pub struct SacState {
    pub config: SacConfig,
    pub policy: Network,
    pub q1: Network,
    pub q2: Network,
    pub q1_target: Network,
    pub q2_target: Network,
    pub log_alpha: f64,
    pub step: u64,
    opt_policy: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: Adam,
}

impl SacState {
    pub fn new(config: SacConfig, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let policy = init_policy(config.policy_shape.clone(), rng);
        let q1 = Network::init(config.q_shape.clone(), rng);
        let q2 = Network::init(config.q_shape.clone(), rng);
        Ok(Self::from_networks(config, policy, q1, q2))
    }

    fn from_networks(config: SacConfig, policy: Network, q1: Network, q2: Network) -> Self {
        let log_alpha = config.initial_alpha.ln();
        SacState {
            opt_policy: Adam::new(policy.params.len(), config.actor_lr),
            opt_q1: Adam::new(q1.params.len(), config.q_lr),
            opt_q2: Adam::new(q2.params.len(), config.q_lr),
            opt_alpha: Adam::new(1, config.alpha_lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_alpha,
            step: 0,
            config,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// One gradient step on every loss followed by the Polyak update.
    pub fn update(&mut self, batch: &SacBatch, rng: &mut Rng64) -> Result<Losses> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Usage("empty update batch".into()));
        }
        let alpha = self.alpha();
        let eps_next = standard_normal(n, rng);
        let y = critic_targets(
            &self.policy,
            &self.q1_target,
            &self.q2_target,
            batch,
            &eps_next.view(),
            alpha,
            self.config.gamma,
        )?;
        let (l1, g1, e1) = critic_pass(&self.q1, batch, &y)?;
        let (l2, g2, e2) = critic_pass(&self.q2, batch, &y)?;
        let eps = standard_normal(n, rng);
        let actor = actor_loss_grad(&self.policy, [&self.q1, &self.q2], [&e1, &e2], batch, &eps.view(), alpha)?;
        let (lt, gt) = temperature_loss_grad(self.log_alpha, &actor.logp, self.config.target_entropy);

        self.opt_q1.step(&mut self.q1.params, &g1);
        self.opt_q2.step(&mut self.q2.params, &g2);
        self.opt_policy.step(&mut self.policy.params, &actor.grad);
        let mut la = [self.log_alpha];
        self.opt_alpha.step(&mut la, &[gt]);
        self.log_alpha = la[0];
        soft_update(&mut self.q1_target, &self.q1, self.config.tau);
        soft_update(&mut self.q2_target, &self.q2, self.config.tau);
        self.step += 1;
        Ok(Losses { actor: actor.loss, q1: l1, q2: l2, temperature: lt, alpha: self.alpha() })
    }

    /// One behavior-cloning step on the policy only.
    pub fn bc_step(&mut self, obs: &SeqBatch, actions: &ArrayView2<f64>) -> Result<f64> {
        let (loss, grad) = bc_loss_grad(&self.policy, obs, actions)?;
        self.opt_policy.step(&mut self.policy.params, &grad);
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            policy_shape: self.policy.shape.clone(),
            q_shape: self.q1.shape.clone(),
            policy: self.policy.params.clone(),
            q1: self.q1.params.clone(),
            q2: self.q2.params.clone(),
            q1_target: self.q1_target.params.clone(),
            q2_target: self.q2_target.params.clone(),
            log_alpha: self.log_alpha,
            step: self.step,
        }
    }

    /// Restores networks from a checkpoint with fresh optimizer state.
    pub fn from_checkpoint(config: SacConfig, c: &Checkpoint) -> Result<Self> {
        c.validate()?;
        if c.policy_shape != config.policy_shape || c.q_shape != config.q_shape {
            return Err(Error::Shape("checkpoint shapes differ from the configured networks".into()));
        }
        let q = |p: &Vec<f64>| Network { shape: c.q_shape.clone(), params: p.clone() };
        let mut s = Self::from_networks(config, c.policy(), q(&c.q1), q(&c.q2));
        s.q1_target = q(&c.q1_target);
        s.q2_target = q(&c.q2_target);
        s.log_alpha = c.log_alpha;
        s.step = c.step;
        Ok(s)
    }
}
