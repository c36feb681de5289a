//! Forward kinematics, geometric Jacobian and damped-least-squares IK for
//! 6-DoF serial arms described by standard Denavit–Hartenberg parameters.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{
    Isometry3, Matrix3, Matrix3x6, Matrix6, SVector, Translation3, UnitQuaternion, Vector3,
    Vector6,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOF: usize = 6;
/// Number of link points reported by forward kinematics.
pub const LINK_COUNT: usize = 10;

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// One arm's joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub [f64; DOF]);

impl JointConfig {
    pub const ZERO: JointConfig = JointConfig([0.0; DOF]);

    pub fn wrapped(&self) -> JointConfig {
        JointConfig(self.0.map(wrap_angle))
    }

    pub fn max_abs_diff(&self, other: &JointConfig) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn lerp(&self, other: &JointConfig, t: f64) -> JointConfig {
        let mut out = [0.0; DOF];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (1.0 - t) * self.0[j] + t * other.0[j];
        }
        JointConfig(out)
    }

    fn to_vector(self) -> Vector6<f64> {
        Vector6::from_column_slice(&self.0)
    }

    fn from_vector(v: &Vector6<f64>) -> JointConfig {
        let mut out = [0.0; DOF];
        out.copy_from_slice(v.as_slice());
        JointConfig(out)
    }
}

impl From<[f64; DOF]> for JointConfig {
    fn from(a: [f64; DOF]) -> Self {
        JointConfig(a)
    }
}

/// Rigid pose with a canonical (w >= 0) unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { position: Vector3::zeros(), orientation: UnitQuaternion::identity() }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose { position, orientation: canonical(orientation) }
    }

    /// Planar pose at height `z` rotated by `yaw` about +z.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose::new(Vector3::new(x, y, z), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Pose::new(iso.translation.vector, iso.rotation)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_isometry(&(self.to_isometry() * other.to_isometry()))
    }

    /// Express `other` in the frame of `self`.
    pub fn relative(&self, other: &Pose) -> Pose {
        Pose::from_isometry(&(self.to_isometry().inverse() * other.to_isometry()))
    }

    /// [x, y, z, w, qx, qy, qz]
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        let p = self.position;
        [p.x, p.y, p.z, q.w, q.i, q.j, q.k]
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_parts(xyz: [f64; 3], wxyz: [f64; 4]) -> Pose {
        let q = nalgebra::Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        // Keep already-unit quaternions bit-exact so serialized poses round-trip.
        let unit = if (q.norm_squared() - 1.0).abs() < 1e-14 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Pose::new(Vector3::from(xyz), unit)
    }

    pub fn position_distance(&self, other: &Pose) -> f64 {
        (self.position - other.position).norm()
    }

    /// Rotation angle between the two orientations, in [0, pi].
    pub fn orientation_distance(&self, other: &Pose) -> f64 {
        let d = self.orientation.coords.dot(&other.orientation.coords).abs().min(1.0);
        2.0 * d.acos()
    }

    pub fn yaw(&self) -> f64 {
        self.orientation.euler_angles().2
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    xyz: [f64; 3],
    quat: [f64; 4],
}

/// Serialized as `{"xyz": [x, y, z], "quat": [w, x, y, z]}`.
impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRecord { xyz: self.position.into(), quat: self.quat_wxyz() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PoseRecord::deserialize(d)?;
        if r.quat.iter().all(|v| *v == 0.0) {
            return Err(serde::de::Error::custom("zero quaternion"));
        }
        Ok(Pose::from_parts(r.xyz, r.quat))
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Standard DH row: Rz(theta + theta0) Tz(d) Tx(a) Rx(alpha).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhParam {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta0: f64,
}

impl DhParam {
    fn transform(&self, q: f64) -> Isometry3<f64> {
        let theta = q + self.theta0;
        let (s, c) = theta.sin_cos();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        Isometry3::from_parts(Translation3::new(self.a * c, self.a * s, self.d), rot)
    }

    fn segment_length(&self) -> f64 {
        self.a.hypot(self.d)
    }
}

/// On-disk arm description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFile {
    pub name: String,
    pub dh: Vec<DhParam>,
    pub limits: Vec<[f64; 2]>,
    pub link_radii: Vec<f64>,
    pub reach: f64,
    pub home: Vec<f64>,
}

const UR5_JSON: &str = include_str!("../config/ur5.json");

/// Kinematic and collision description of one 6-DoF arm.
#[derive(Debug, Clone)]
pub struct ArmModel {
    pub name: String,
    pub dh: [DhParam; DOF],
    pub limits: [(f64, f64); DOF],
    pub link_radii: [f64; LINK_COUNT],
    pub reach: f64,
    pub home: JointConfig,
    /// DH segments that receive an extra midpoint so the chain has LINK_COUNT points.
    split_segments: [bool; DOF],
    pub(crate) self_pairs: OnceLock<Vec<(usize, usize)>>,
}

impl ArmModel {
    pub fn from_file_spec(spec: ArmFile) -> Result<Self> {
        let arity = |what: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::InvalidArm(format!("{what}: expected {want} entries, got {got}")))
            } else {
                Ok(())
            }
        };
        arity("dh", spec.dh.len(), DOF)?;
        arity("limits", spec.limits.len(), DOF)?;
        arity("link_radii", spec.link_radii.len(), LINK_COUNT)?;
        arity("home", spec.home.len(), DOF)?;

        let mut limits = [(0.0, 0.0); DOF];
        for (j, l) in spec.limits.iter().enumerate() {
            if !(l[0] < l[1]) {
                return Err(Error::InvalidArm(format!("joint {j}: lo {} >= hi {}", l[0], l[1])));
            }
            limits[j] = (l[0], l[1]);
        }
        if !(spec.reach > 0.0) {
            return Err(Error::InvalidArm(format!("reach must be positive, got {}", spec.reach)));
        }
        if let Some(r) = spec.link_radii.iter().find(|r| !(**r > 0.0)) {
            return Err(Error::InvalidArm(format!("link radius must be positive, got {r}")));
        }
        let dh: [DhParam; DOF] = spec.dh.try_into().expect("arity checked");
        let link_radii: [f64; LINK_COUNT] = spec.link_radii.try_into().expect("arity checked");
        let home = JointConfig(spec.home.try_into().expect("arity checked"));

        // Split the three longest DH segments (ties resolved by index).
        let mut order: Vec<usize> = (0..DOF).collect();
        order.sort_by(|&i, &j| {
            dh[j].segment_length().partial_cmp(&dh[i].segment_length()).unwrap().then(i.cmp(&j))
        });
        let mut split_segments = [false; DOF];
        for &i in order.iter().take(LINK_COUNT - 1 - DOF) {
            split_segments[i] = true;
        }

        let arm = ArmModel {
            name: spec.name,
            dh,
            limits,
            link_radii,
            reach: spec.reach,
            home,
            split_segments,
            self_pairs: OnceLock::new(),
        };
        arm.check_limits(&arm.home)?;
        Ok(arm)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: ArmFile = serde_json::from_str(s)?;
        Self::from_file_spec(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    /// The bundled UR5-like parameter set.
    pub fn ur5() -> Self {
        Self::from_json_str(UR5_JSON).expect("bundled arm file is valid")
    }

    pub fn to_file_spec(&self) -> ArmFile {
        ArmFile {
            name: self.name.clone(),
            dh: self.dh.to_vec(),
            limits: self.limits.iter().map(|&(lo, hi)| [lo, hi]).collect(),
            link_radii: self.link_radii.to_vec(),
            reach: self.reach,
            home: self.home.0.to_vec(),
        }
    }

    /// Wraps every angle to (-pi, pi] and checks it against the joint limits.
    pub fn check_limits(&self, q: &JointConfig) -> Result<JointConfig> {
        let w = q.wrapped();
        for (j, (&v, &(lo, hi))) in w.0.iter().zip(self.limits.iter()).enumerate() {
            if !(v >= lo - 1e-12 && v <= hi + 1e-12) {
                return Err(Error::JointLimit { joint: j, value: v, lo, hi });
            }
        }
        Ok(w)
    }

    pub fn clamp_to_limits(&self, q: &JointConfig) -> JointConfig {
        let mut out = q.0;
        for (v, &(lo, hi)) in out.iter_mut().zip(self.limits.iter()) {
            *v = v.clamp(lo, hi);
        }
        JointConfig(out)
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> JointConfig {
        let mut out = [0.0; DOF];
        for (v, &(lo, hi)) in out.iter_mut().zip(self.limits.iter()) {
            *v = rng.random_range(lo..hi);
        }
        JointConfig(out)
    }

    /// Frames 0..=6 in the arm base frame, without limit checks.
    pub fn frames_unchecked(&self, q: &JointConfig) -> [Isometry3<f64>; DOF + 1] {
        let mut frames = [Isometry3::identity(); DOF + 1];
        for j in 0..DOF {
            frames[j + 1] = frames[j] * self.dh[j].transform(q.0[j]);
        }
        frames
    }

    fn link_points_from_frames(&self, frames: &[Isometry3<f64>; DOF + 1]) -> [Vector3<f64>; LINK_COUNT] {
        let mut pts = [Vector3::zeros(); LINK_COUNT];
        let mut n = 1;
        for j in 0..DOF {
            let a = frames[j].translation.vector;
            let b = frames[j + 1].translation.vector;
            if self.split_segments[j] {
                pts[n] = 0.5 * (a + b);
                n += 1;
            }
            pts[n] = b;
            n += 1;
        }
        debug_assert_eq!(n, LINK_COUNT);
        pts
    }

    /// FK in the arm base frame without limit checks; used by hot loops that
    /// already hold validated configurations.
    pub fn fk_unchecked(&self, q: &JointConfig) -> ForwardKinematics {
        let frames = self.frames_unchecked(q);
        ForwardKinematics {
            ee_pose: Pose::from_isometry(&frames[DOF]),
            link_origins: self.link_points_from_frames(&frames),
        }
    }

    pub fn ee_position_unchecked(&self, q: &JointConfig) -> Vector3<f64> {
        let mut t = Isometry3::identity();
        for j in 0..DOF {
            t *= self.dh[j].transform(q.0[j]);
        }
        t.translation.vector
    }
}

/// Result of forward kinematics in the arm's base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardKinematics {
    pub ee_pose: Pose,
    /// Link points ordered from the base origin to the flange.
    pub link_origins: [Vector3<f64>; LINK_COUNT],
}

impl ForwardKinematics {
    pub fn transformed(&self, base: &Pose) -> ForwardKinematics {
        let iso = base.to_isometry();
        ForwardKinematics {
            ee_pose: base.compose(&self.ee_pose),
            link_origins: self.link_origins.map(|p| iso.transform_point(&p.into()).coords),
        }
    }
}

pub fn forward_kinematics(arm: &ArmModel, q: &JointConfig) -> Result<ForwardKinematics> {
    let q = arm.check_limits(q)?;
    Ok(arm.fk_unchecked(&q))
}

/// FK with the arm mounted at `base` (world frame output).
pub fn forward_kinematics_world(arm: &ArmModel, base: &Pose, q: &JointConfig) -> Result<ForwardKinematics> {
    Ok(forward_kinematics(arm, q)?.transformed(base))
}

/// Geometric Jacobian in the base frame; rows 0..3 linear, rows 3..6 angular.
pub fn jacobian(arm: &ArmModel, q: &JointConfig) -> Result<Matrix6<f64>> {
    let q = arm.check_limits(q)?;
    Ok(jacobian_unchecked(arm, &q))
}

pub fn jacobian_unchecked(arm: &ArmModel, q: &JointConfig) -> Matrix6<f64> {
    let frames = arm.frames_unchecked(q);
    let p_ee = frames[DOF].translation.vector;
    let mut jac = Matrix6::zeros();
    for j in 0..DOF {
        let z = frames[j].rotation * Vector3::z();
        let p = frames[j].translation.vector;
        let lin = z.cross(&(p_ee - p));
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, j).copy_from(&z);
    }
    jac
}

/// Damped-least-squares IK settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkParams {
    pub damping: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    /// Converged once the position residual drops below this, m.
    pub tolerance: f64,
    /// Residual accepted as success at the end of an attempt, m.
    pub accept: f64,
    pub home_gain: f64,
    pub home_seed_noise: f64,
    pub max_step: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        IkParams {
            damping: 0.05,
            max_iterations: 200,
            restarts: 10,
            tolerance: 1e-7,
            accept: 1e-3,
            home_gain: 0.1,
            home_seed_noise: 0.3,
            max_step: 0.5,
        }
    }
}

/// Position-only IK toward `target_position` (arm base frame).
///
/// Returns `None` when the target is outside the reach sphere or no attempt
/// converges; the caller is expected to resample the target.
pub fn solve_ik<R: Rng + ?Sized>(
    arm: &ArmModel,
    target_position: &Vector3<f64>,
    seed: &JointConfig,
    bias_home: bool,
    rng: &mut R,
) -> Option<JointConfig> {
    solve_ik_with(arm, target_position, seed, bias_home, &IkParams::default(), rng)
}

pub fn solve_ik_with<R: Rng + ?Sized>(
    arm: &ArmModel,
    target_position: &Vector3<f64>,
    seed: &JointConfig,
    bias_home: bool,
    params: &IkParams,
    rng: &mut R,
) -> Option<JointConfig> {
    if target_position.norm() > arm.reach {
        return None;
    }
    for attempt in 0..=params.restarts {
        let start = match (attempt, bias_home) {
            (0, false) => *seed,
            (0, true) => {
                let mut q = arm.home.0;
                for v in q.iter_mut() {
                    *v += rng.random_range(-params.home_seed_noise..=params.home_seed_noise);
                }
                arm.clamp_to_limits(&JointConfig(q))
            }
            _ => arm.random_config(rng),
        };
        if let Some(q) = dls_attempt(arm, target_position, start, bias_home, params) {
            return Some(q);
        }
    }
    None
}

fn dls_attempt(
    arm: &ArmModel,
    target: &Vector3<f64>,
    start: JointConfig,
    bias_home: bool,
    params: &IkParams,
) -> Option<JointConfig> {
    let lambda2 = params.damping * params.damping;
    let home = arm.home.to_vector();
    let mut q = start.to_vector();
    for _ in 0..params.max_iterations {
        let cfg = JointConfig::from_vector(&q);
        let err = target - arm.ee_position_unchecked(&cfg);
        if err.norm() < params.tolerance {
            break;
        }
        let jp: Matrix3x6<f64> = jacobian_unchecked(arm, &cfg).fixed_view::<3, 6>(0, 0).into_owned();
        let jjt: Matrix3<f64> = jp * jp.transpose() + Matrix3::identity() * lambda2;
        let inv = jjt.try_inverse()?;
        let mut dq: Vector6<f64> = jp.transpose() * (inv * err);
        if bias_home {
            dq += null_space_projector(&jp) * ((home - q) * params.home_gain);
        }
        let m = dq.amax();
        if m > params.max_step {
            dq *= params.max_step / m;
        }
        q += dq;
        for (j, v) in q.iter_mut().enumerate() {
            let (lo, hi) = arm.limits[j];
            *v = wrap_angle(*v).clamp(lo, hi);
        }
    }
    let cfg = JointConfig::from_vector(&q);
    let residual = (target - arm.ee_position_unchecked(&cfg)).norm();
    (residual < params.accept).then_some(cfg)
}

/// Exact projector onto the null space of a 3x6 Jacobian.
fn null_space_projector(jp: &Matrix3x6<f64>) -> Matrix6<f64> {
    let svd = jp.transpose().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut proj = Matrix6::identity();
    for k in 0..3 {
        if svd.singular_values[k] > 1e-9 {
            let v: SVector<f64, 6> = u.column(k).into_owned();
            proj -= v * v.transpose();
        }
    }
    proj
}
