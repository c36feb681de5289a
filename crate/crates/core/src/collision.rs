//! Capsule collision checking for multi-arm worlds.
//!
//! Each arm is approximated by one capsule per consecutive pair of link
//! points. A world reports self contacts, arm-arm contacts and ground
//! contacts; motions are validated by sampling the joint-space segment at a
//! fixed per-joint resolution.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ArmModel, JointConfig, Pose, LINK_COUNT};

pub const CAPSULES_PER_ARM: usize = LINK_COUNT - 1;
/// Capsules at the start of the chain that are exempt from ground checks.
pub const GROUND_EXEMPT_LINKS: usize = 2;
pub const GROUND_CLEARANCE: f64 = 0.01;

/// Pairs colliding in at least this fraction of random configurations are
/// treated as permanently touching and skipped by the self check.
const ALWAYS_COLLIDING_FRACTION: f64 = 0.95;
const SELF_FILTER_SAMPLES: usize = 1000;
const SELF_FILTER_SEED: u64 = 0x5e1f;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Self {
        Capsule { a, b, radius }
    }

    fn aabb(&self) -> Aabb {
        let r = Vector3::repeat(self.radius);
        Aabb { min: self.a.inf(&self.b) - r, max: self.a.sup(&self.b) + r }
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb { min: Vector3::repeat(f64::INFINITY), max: Vector3::repeat(f64::NEG_INFINITY) }
    }

    fn merge(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&o.min), max: self.max.sup(&o.max) }
    }

    fn overlaps(&self, o: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= o.max[i] && o.min[i] <= self.max[i])
    }
}

/// Closest distance between segments [p1, q1] and [p2, q2].
fn segment_distance_ordered(p1: &Vector3<f64>, q1: &Vector3<f64>, p2: &Vector3<f64>, q2: &Vector3<f64>) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    const EPS: f64 = 1e-18;

    let (s, t) = if a <= EPS && e <= EPS {
        (0.0, 0.0)
    } else if a <= EPS {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > 1e-12 * a * e { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    (c1 - c2).norm()
}

fn lex_less(a: &Capsule, b: &Capsule) -> bool {
    let ka = [a.a.x, a.a.y, a.a.z, a.b.x, a.b.y, a.b.z];
    let kb = [b.a.x, b.a.y, b.a.z, b.b.x, b.b.y, b.b.z];
    ka.partial_cmp(&kb) == Some(std::cmp::Ordering::Less)
}

/// Distance between the two segment axes; symmetric bit-for-bit.
pub fn segment_distance(a: &Capsule, b: &Capsule) -> f64 {
    let (x, y) = if lex_less(b, a) { (b, a) } else { (a, b) };
    segment_distance_ordered(&x.a, &x.b, &y.a, &y.b)
}

/// Signed separation: segment distance minus the radius sum (negative on penetration).
pub fn capsule_distance(a: &Capsule, b: &Capsule) -> f64 {
    segment_distance(a, b) - (a.radius + b.radius)
}

/// Capsules of `arm` at configuration `q` with the base mounted at `base`.
pub fn arm_capsules(arm: &ArmModel, base: &Pose, q: &JointConfig) -> Result<Vec<Capsule>> {
    let q = arm.check_limits(q)?;
    Ok(capsules_unchecked(arm, base, &q).to_vec())
}

pub(crate) fn capsules_unchecked(arm: &ArmModel, base: &Pose, q: &JointConfig) -> [Capsule; CAPSULES_PER_ARM] {
    let pts = arm.fk_unchecked(q).transformed(base).link_origins;
    capsules_from_points(arm, &pts)
}

fn capsules_from_points(arm: &ArmModel, pts: &[Vector3<f64>; LINK_COUNT]) -> [Capsule; CAPSULES_PER_ARM] {
    std::array::from_fn(|i| Capsule::new(pts[i], pts[i + 1], arm.link_radii[i + 1]))
}

/// Non-adjacent capsule pairs that the self-collision check examines.
pub fn self_check_pairs(arm: &ArmModel) -> &[(usize, usize)] {
    arm.self_pairs.get_or_init(|| compute_self_pairs(arm))
}

fn compute_self_pairs(arm: &ArmModel) -> Vec<(usize, usize)> {
    let home = capsules_unchecked(arm, &Pose::identity(), &arm.home);
    let mut rng = ChaCha8Rng::seed_from_u64(SELF_FILTER_SEED);
    let samples: Vec<[Capsule; CAPSULES_PER_ARM]> = (0..SELF_FILTER_SAMPLES)
        .map(|_| capsules_unchecked(arm, &Pose::identity(), &arm.random_config(&mut rng)))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..CAPSULES_PER_ARM {
        for j in i + 2..CAPSULES_PER_ARM {
            let (ci, cj) = (&home[i], &home[j]);
            let shares_point = [ci.a, ci.b]
                .iter()
                .any(|p| (p - cj.a).norm() < 1e-9 || (p - cj.b).norm() < 1e-9);
            if shares_point || capsule_distance(ci, cj) < 0.0 {
                continue;
            }
            let hits = samples.iter().filter(|c| capsule_distance(&c[i], &c[j]) < 0.0).count();
            if (hits as f64) < ALWAYS_COLLIDING_FRACTION * SELF_FILTER_SAMPLES as f64 {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone)]
pub struct PlacedArm {
    pub model: Arc<ArmModel>,
    pub base: Pose,
}

/// Arms mounted on a ground plane. Immutable after construction.
#[derive(Debug, Clone)]
pub struct World {
    pub arms: Vec<PlacedArm>,
    pub ground_height: f64,
}

impl World {
    pub fn new(arms: Vec<PlacedArm>, ground_height: f64) -> Result<Self> {
        for (i, a) in arms.iter().enumerate() {
            let (roll, pitch, _) = a.base.orientation.euler_angles();
            if (a.base.position.z - ground_height).abs() > 1e-9 || roll.abs() > 1e-9 || pitch.abs() > 1e-9 {
                return Err(Error::Config(format!("arm {i} base pose is not planar on the ground")));
            }
        }
        Ok(World { arms, ground_height })
    }

    /// All arms share one model.
    pub fn homogeneous(model: Arc<ArmModel>, bases: &[Pose], ground_height: f64) -> Result<Self> {
        World::new(bases.iter().map(|b| PlacedArm { model: model.clone(), base: *b }).collect(), ground_height)
    }

    pub fn arm_count(&self) -> usize {
        self.arms.len()
    }

    fn check_arity(&self, q: &[JointConfig]) -> Result<()> {
        if q.len() != self.arms.len() {
            return Err(Error::Arity { expected: self.arms.len(), got: q.len() });
        }
        Ok(())
    }

    fn world_capsules(&self, q: &[JointConfig]) -> Result<Vec<[Capsule; CAPSULES_PER_ARM]>> {
        self.check_arity(q)?;
        self.arms
            .iter()
            .zip(q)
            .map(|(a, qi)| {
                let qi = a.model.check_limits(qi)?;
                Ok(capsules_unchecked(&a.model, &a.base, &qi))
            })
            .collect()
    }

    /// Full contact report for a composite configuration.
    pub fn check(&self, q: &[JointConfig]) -> Result<CollisionReport> {
        let caps = self.world_capsules(q)?;
        let mut pairs = Vec::new();
        self.scan(&caps, &mut |a, b| {
            pairs.push((a, b));
            false
        });
        Ok(CollisionReport { pairs })
    }

    /// Early-exit predicate.
    pub fn in_collision(&self, q: &[JointConfig]) -> Result<bool> {
        let caps = self.world_capsules(q)?;
        let mut hit = false;
        self.scan(&caps, &mut |_, _| {
            hit = true;
            true
        });
        Ok(hit)
    }

    /// Visits every contact; `visit` returns true to stop.
    fn scan(&self, caps: &[[Capsule; CAPSULES_PER_ARM]], visit: &mut dyn FnMut(LinkRef, Contact) -> bool) {
        let ground = self.ground_height + GROUND_CLEARANCE;
        for (ai, arm) in self.arms.iter().enumerate() {
            let c = &caps[ai];
            for (li, cap) in c.iter().enumerate().skip(GROUND_EXEMPT_LINKS) {
                if cap.a.z.min(cap.b.z) - cap.radius < ground
                    && visit(LinkRef { arm: ai, link: li }, Contact::Ground)
                {
                    return;
                }
            }
            for &(i, j) in self_check_pairs(&arm.model) {
                if capsule_distance(&c[i], &c[j]) < 0.0
                    && visit(LinkRef { arm: ai, link: i }, Contact::Link(LinkRef { arm: ai, link: j }))
                {
                    return;
                }
            }
        }
        let boxes: Vec<Vec<Aabb>> = caps.iter().map(|c| c.iter().map(Capsule::aabb).collect()).collect();
        let arm_boxes: Vec<Aabb> = boxes.iter().map(|b| b.iter().fold(Aabb::empty(), |acc, x| acc.merge(x))).collect();
        for ai in 0..caps.len() {
            for aj in ai + 1..caps.len() {
                if !arm_boxes[ai].overlaps(&arm_boxes[aj]) {
                    continue;
                }
                for li in 0..CAPSULES_PER_ARM {
                    if !boxes[ai][li].overlaps(&arm_boxes[aj]) {
                        continue;
                    }
                    for lj in 0..CAPSULES_PER_ARM {
                        if boxes[ai][li].overlaps(&boxes[aj][lj])
                            && capsule_distance(&caps[ai][li], &caps[aj][lj]) < 0.0
                            && visit(
                                LinkRef { arm: ai, link: li },
                                Contact::Link(LinkRef { arm: aj, link: lj }),
                            )
                        {
                            return;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkRef {
    pub arm: usize,
    pub link: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Contact {
    Link(LinkRef),
    Ground,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub pairs: Vec<(LinkRef, Contact)>,
}

impl CollisionReport {
    pub fn colliding(&self) -> bool {
        !self.pairs.is_empty()
    }

    /// Sorted, deduplicated indices of arms taking part in any contact.
    pub fn colliding_arms(&self) -> Vec<usize> {
        let mut arms: Vec<usize> = self
            .pairs
            .iter()
            .flat_map(|(a, b)| match b {
                Contact::Link(l) => vec![a.arm, l.arm],
                Contact::Ground => vec![a.arm],
            })
            .collect();
        arms.sort_unstable();
        arms.dedup();
        arms
    }
}

pub fn check_collision(world: &World, composite_q: &[JointConfig]) -> Result<CollisionReport> {
    world.check(composite_q)
}

/// Number of interpolation intervals so that no joint moves more than `resolution` per interval.
pub fn interpolation_steps(from: &[JointConfig], to: &[JointConfig], resolution: f64) -> usize {
    let max = from.iter().zip(to).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    ((max / resolution).ceil() as usize).max(1)
}

pub fn interpolate(from: &[JointConfig], to: &[JointConfig], t: f64) -> Vec<JointConfig> {
    from.iter().zip(to).map(|(a, b)| a.lerp(b, t)).collect()
}

/// True iff every interpolated configuration (endpoints included) is free.
pub fn segment_collision_free(world: &World, q_from: &[JointConfig], q_to: &[JointConfig], resolution: f64) -> bool {
    assert!(resolution > 0.0, "resolution must be positive");
    if q_from.len() != world.arm_count() || q_to.len() != world.arm_count() {
        return false;
    }
    let n = interpolation_steps(q_from, q_to, resolution);
    // Endpoints first: they reject most invalid motions.
    let order = std::iter::once(n).chain(std::iter::once(0)).chain(1..n);
    for i in order {
        let q = interpolate(q_from, q_to, i as f64 / n as f64);
        if !matches!(world.in_collision(&q), Ok(false)) {
            return false;
        }
    }
    true
}

/// First colliding configuration along the segment, walking from `q_from`.
pub fn first_collision_on_segment(
    world: &World,
    q_from: &[JointConfig],
    q_to: &[JointConfig],
    resolution: f64,
) -> Result<Option<(Vec<JointConfig>, CollisionReport)>> {
    let n = interpolation_steps(q_from, q_to, resolution);
    for i in 0..=n {
        let q = interpolate(q_from, q_to, i as f64 / n as f64);
        let report = world.check(&q)?;
        if report.colliding() {
            return Ok(Some((q, report)));
        }
    }
    Ok(None)
}
