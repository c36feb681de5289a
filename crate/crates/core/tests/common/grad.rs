//! Central finite differences against the analytic gradients of every loss.

use std::sync::Arc;

use multiarm::env::{ArmState, ObservationSequence, Transition, ACTION_DIM};
use multiarm::neural::{init_policy, NetShape, Network, SeqBatch};
use multiarm::sac::{
    actor_loss_grad, bc_loss_grad, critic_loss_grad, standard_normal, temperature_loss_grad, SacBatch,
};
use multiarm::seed::{rng_from, Rng64};
use ndarray::{Array1, Array2};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Denominator floor so gradients that are zero up to rounding compare absolutely.
const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

pub fn seq(len: usize, rng: &mut Rng64) -> Arc<ObservationSequence> {
    let states = (0..len).map(|_| ArmState(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))).collect();
    Arc::new(ObservationSequence { states, arms: (0..len).collect() })
}

/// Four transitions of mixed sequence lengths.
pub fn toy_batch(rng: &mut Rng64) -> SacBatch {
    let lens = [1, 3, 2, 3];
    let ts: Vec<Transition> = lens
        .iter()
        .map(|&l| Transition {
            observation: seq(l, rng),
            action: std::array::from_fn(|_| rng.random_range(-0.95..0.95)),
            reward: rng.random_range(-0.1..1.0),
            next_observation: seq(l, rng),
            done: rng.random::<f64>() < 0.3,
        })
        .collect();
    SacBatch::from_transitions(&ts.iter().collect::<Vec<_>>()).unwrap()
}

pub fn shapes() -> (NetShape, NetShape) {
    (NetShape::policy(3, &[5, 4]), NetShape::q(3, &[5, 4]))
}

/// Worst relative error over all parameters.
pub fn check(net: &Network, analytic: &[f64], loss: &dyn Fn(&Network) -> f64) -> f64 {
    assert_eq!(analytic.len(), net.params.len());
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.params.len() {
        let x = net.params[i];
        probe.params[i] = x + H;
        let up = loss(&probe);
        probe.params[i] = x - H;
        let down = loss(&probe);
        probe.params[i] = x;
        let fd = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

pub fn critic_worst(seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let (_, qs) = shapes();
    let batch = toy_batch(&mut rng);
    let targets = Array1::from_shape_fn(batch.len(), |_| rng.random_range(-1.0..1.0));
    let q = Network::init(qs, &mut rng);
    let (_, g) = critic_loss_grad(&q, &batch, &targets).unwrap();
    check(&q, &g, &|n| critic_loss_grad(n, &batch, &targets).unwrap().0)
}

pub fn actor_worst(seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let (ps, qs) = shapes();
    let batch = toy_batch(&mut rng);
    let policy = init_policy(ps, &mut rng);
    let q1 = Network::init(qs.clone(), &mut rng);
    let q2 = Network::init(qs, &mut rng);
    let (e1, _) = q1.encode(&batch.obs).unwrap();
    let (e2, _) = q2.encode(&batch.obs).unwrap();
    let eps = standard_normal(batch.len(), &mut rng);
    let alpha = 0.3;
    let r = actor_loss_grad(&policy, [&q1, &q2], [&e1, &e2], &batch, &eps.view(), alpha).unwrap();
    check(&policy, &r.grad, &|n| actor_loss_grad(n, [&q1, &q2], [&e1, &e2], &batch, &eps.view(), alpha).unwrap().loss)
}

pub fn temperature_worst() -> f64 {
    let logp = Array1::from(vec![-3.0, 1.5, 0.2, -7.0]);
    [-2.0, 0.0, 0.7]
        .iter()
        .map(|&la| {
            let (_, g) = temperature_loss_grad(la, &logp, -6.0);
            let fd =
                (temperature_loss_grad(la + H, &logp, -6.0).0 - temperature_loss_grad(la - H, &logp, -6.0).0) / (2.0 * H);
            rel_err(g, fd)
        })
        .fold(0.0, f64::max)
}

pub fn bc_worst(seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let (ps, _) = shapes();
    let policy = init_policy(ps, &mut rng);
    let seqs: Vec<Arc<ObservationSequence>> = [2, 1, 3].iter().map(|&l| seq(l, &mut rng)).collect();
    let obs = SeqBatch::from_observations(&seqs.iter().map(|s| s.as_ref()).collect::<Vec<_>>()).unwrap();
    // One target sits exactly on the squashing boundary.
    let actions =
        Array2::from_shape_fn((3, ACTION_DIM), |(r, c)| if r == 0 && c == 0 { 1.0 } else { rng.random_range(-0.99..0.99) });
    let (_, g) = bc_loss_grad(&policy, &obs, &actions.view()).unwrap();
    check(&policy, &g, &|n| bc_loss_grad(n, &obs, &actions.view()).unwrap().0)
}
