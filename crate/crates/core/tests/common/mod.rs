//! Independent oracles shared by the integration tests. The oracles here do
//! not call the library's kinematics, collision or reward code.

#![allow(dead_code)]

pub mod audit;
pub mod grad;

use std::f64::consts::PI;

use multiarm::env::{LogRecord, COLLISION_PENALTY, REACH_REWARD, SELFISH_REACH_REWARD, TEAM_REWARD};
use multiarm::env::{EnvConfig, RewardScheme};
use multiarm::kinematics::{ArmModel, JointConfig, Pose};

pub type M4 = [[f64; 4]; 4];

pub fn mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn identity() -> M4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Homogeneous DH transform written out element by element.
fn dh_matrix(theta: f64, d: f64, a: f64, alpha: f64) -> M4 {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    [
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// exp([S] theta) for a revolute screw with unit axis `w` through point `p`.
fn screw_exp(w: [f64; 3], p: [f64; 3], theta: f64) -> M4 {
    let (s, c) = theta.sin_cos();
    let k = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let kk: f64 = (0..3).map(|m| k[i][m] * k[m][j]).sum();
            r[i][j] = if i == j { 1.0 } else { 0.0 } + s * k[i][j] + (1.0 - c) * kk;
        }
    }
    // Rotation about an axis through p: translation (I - R) p.
    let mut out = identity();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j];
        }
        out[i][3] = p[i] - (0..3).map(|j| r[i][j] * p[j]).sum::<f64>();
    }
    out
}

/// Product-of-exponentials forward kinematics built from the zero-angle
/// geometry of the DH chain.
pub struct PoeOracle {
    axes: Vec<([f64; 3], [f64; 3])>,
    home: M4,
}

impl PoeOracle {
    pub fn new(arm: &ArmModel) -> Self {
        let mut t = identity();
        let mut axes = Vec::new();
        for p in &arm.dh {
            axes.push(([t[0][2], t[1][2], t[2][2]], [t[0][3], t[1][3], t[2][3]]));
            t = mul(&t, &dh_matrix(p.theta0, p.d, p.a, p.alpha));
        }
        PoeOracle { axes, home: t }
    }

    pub fn fk(&self, q: &JointConfig) -> M4 {
        let mut t = identity();
        for (j, (w, p)) in self.axes.iter().enumerate() {
            t = mul(&t, &screw_exp(*w, *p, q.0[j]));
        }
        mul(&t, &self.home)
    }
}

pub fn position(m: &M4) -> [f64; 3] {
    [m[0][3], m[1][3], m[2][3]]
}

/// Rotation angle of Ra^T Rb from the trace.
pub fn rotation_angle_between(a: &M4, b: &M4) -> f64 {
    let mut tr = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            tr += a[k][i] * b[k][i];
        }
    }
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn pose_matrix(p: &Pose) -> M4 {
    let r = p.orientation.to_rotation_matrix();
    let mut m = identity();
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[(i, j)];
        }
        m[i][3] = p.position[i];
    }
    m
}

pub fn planar_matrix(x: f64, y: f64, z: f64, yaw: f64) -> M4 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0, x], [s, c, 0.0, y], [0.0, 0.0, 1.0, z], [0.0, 0.0, 0.0, 1.0]]
}

/// World end-effector pose of an arm at `base` by the PoE oracle.
pub fn world_ee(oracle: &PoeOracle, base: &Pose, q: &JointConfig) -> M4 {
    mul(&pose_matrix(base), &oracle.fk(q))
}

/// Pairwise workspace lens fraction: volume of the intersection of two
/// hemispheres of radius r with bases d apart (both on the ground), over one
/// hemisphere's volume.
pub fn lens_fraction(d: f64, r: f64) -> f64 {
    if d >= 2.0 * r {
        return 0.0;
    }
    let lens = PI * (4.0 * r + d) * (2.0 * r - d).powi(2) / 12.0;
    (lens / 2.0) / (2.0 * PI * r.powi(3) / 3.0)
}

/// Re-derives every reward, done flag and success flag of a logged episode
/// from the logged joint configurations and targets. Returns the number of
/// mismatches.
pub fn recount_episode(arm: &ArmModel, log: &[LogRecord]) -> usize {
    let oracle = PoeOracle::new(arm);
    let LogRecord::Reset { bases, reached: r0, config, targets: t0, q: q0, .. } = &log[0] else {
        return usize::MAX;
    };
    // Oracle reach flags; None when a distance sits within rounding of its tolerance.
    let reach = |q: &[JointConfig], targets: &[Pose], cfg: &EnvConfig| -> Vec<Option<bool>> {
        q.iter()
            .zip(bases)
            .zip(targets)
            .map(|((q, b), t)| {
                let m = world_ee(&oracle, b, q);
                let tm = pose_matrix(t);
                let p = position(&m);
                let tp = position(&tm);
                let dp = ((p[0] - tp[0]).powi(2) + (p[1] - tp[1]).powi(2) + (p[2] - tp[2]).powi(2)).sqrt();
                let dr = rotation_angle_between(&m, &tm);
                let near = (dp - cfg.position_tolerance).abs() < 1e-9 || (dr - cfg.orientation_tolerance).abs() < 1e-6;
                (!near).then_some(dp <= cfg.position_tolerance && dr <= cfg.orientation_tolerance)
            })
            .collect()
    };
    let settle = |oracle: Vec<Option<bool>>, logged: &[bool], errors: &mut usize| -> Vec<bool> {
        oracle
            .iter()
            .zip(logged)
            .map(|(o, l)| match o {
                Some(v) => {
                    if v != l {
                        *errors += 1;
                    }
                    *v
                }
                None => *l,
            })
            .collect()
    };
    let mut errors = 0;
    let mut prev = settle(reach(q0, t0, config), r0, &mut errors);
    let steps = log.len() - 1;
    if steps > config.max_steps {
        errors += 1;
    }
    for (n, rec) in log[1..].iter().enumerate() {
        let LogRecord::Step { step, q, targets, rewards, reached, collided_arms, done, success, .. } = rec else {
            errors += 1;
            continue;
        };
        if *step != n + 1 {
            errors += 1;
        }
        let now = settle(reach(q, targets, config), reached, &mut errors);
        let k = q.len();
        let all = now.iter().all(|r| *r);
        let collided = !collided_arms.is_empty();
        let mut expect = vec![0.0; k];
        if collided {
            for &i in collided_arms {
                expect[i] += COLLISION_PENALTY;
            }
        } else {
            let edge = match config.reward_scheme {
                RewardScheme::Team => REACH_REWARD,
                RewardScheme::Selfish => SELFISH_REACH_REWARD,
            };
            for i in 0..k {
                if now[i] && !prev[i] {
                    expect[i] += edge;
                }
            }
            if all && config.reward_scheme == RewardScheme::Team {
                for e in expect.iter_mut() {
                    *e += TEAM_REWARD;
                }
            }
        }
        if expect.iter().zip(rewards).any(|(a, b)| (a - b).abs() > 1e-12) {
            errors += 1;
        }
        let expect_done = collided || all || *step >= config.max_steps;
        if *done != expect_done || *success != (!collided && all) {
            errors += 1;
        }
        let last = n + 1 == steps;
        if *done != last {
            errors += 1;
        }
        prev = now;
    }
    errors
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Segment-segment distance by grid sampling of the (s, t) square followed by
/// `zoom` rounds of re-gridding around the best sample. The objective is
/// convex, so zooming converges to the true minimum.
pub fn sampled_segment_distance(a0: [f64; 3], a1: [f64; 3], b0: [f64; 3], b1: [f64; 3], n: usize, zoom: usize) -> f64 {
    let (mut s_lo, mut s_hi, mut t_lo, mut t_hi) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..=zoom {
        for i in 0..=n {
            let s = s_lo + (s_hi - s_lo) * i as f64 / n as f64;
            let p = lerp3(&a0, &a1, s);
            for j in 0..=n {
                let t = t_lo + (t_hi - t_lo) * j as f64 / n as f64;
                let d = dist3(&p, &lerp3(&b0, &b1, t));
                if d < best.0 {
                    best = (d, s, t);
                }
            }
        }
        let (ws, wt) = (2.0 * (s_hi - s_lo) / n as f64, 2.0 * (t_hi - t_lo) / n as f64);
        s_lo = (best.1 - ws).max(0.0);
        s_hi = (best.1 + ws).min(1.0);
        t_lo = (best.2 - wt).max(0.0);
        t_hi = (best.2 + wt).min(1.0);
    }
    best.0
}

pub fn v3(v: &nalgebra::Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}
