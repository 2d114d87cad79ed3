//! Whole-body kinematics: two planar SCARA arms on a shared lift, a
//! differential-drive base, and the 18-slot command vector.

use crate::plant::quantize;
use crate::pose::Pose6D;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("joint {joint} = {value} outside [{min}, {max}]")]
    JointLimit {
        joint: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("invalid kinematic config: {0}")]
    InvalidConfig(String),
}

/// Wrap to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn unit(self) -> Vector3<f64> {
        match self {
            Axis::X => Vector3::x(),
            Axis::Y => Vector3::y(),
            Axis::Z => Vector3::z(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLimits {
    pub shoulder: [f64; 2],
    pub elbow: [f64; 2],
    pub wrist1: [f64; 2],
    pub wrist2: [f64; 2],
    pub wrist3: [f64; 2],
}

impl Default for JointLimits {
    fn default() -> Self {
        Self {
            shoulder: [-PI, PI],
            elbow: [-PI, PI],
            wrist1: [-PI, PI],
            wrist2: [-PI, PI],
            wrist3: [-PI, PI],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    pub l1: f64,
    pub l2: f64,
    pub lift_range: [f64; 2],
    /// Proper Euler sequence `[a, b, a]`; the default is roll-pitch-roll
    /// about the tool x and y axes.
    pub wrist_axes: [Axis; 3],
    pub joint_limits: JointLimits,
    /// Lateral (body y) offset of the shoulder axis.
    pub shoulder_offset: f64,
    pub gripper_max: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            l1: 0.375,
            l2: 0.375,
            lift_range: [0.0, 1.25],
            wrist_axes: [Axis::X, Axis::Y, Axis::X],
            joint_limits: JointLimits::default(),
            shoulder_offset: 0.2,
            gripper_max: 0.12,
        }
    }
}

const REACH_EPS: f64 = 1e-9;
const LIMIT_EPS: f64 = 1e-12;
const WRIST_SINGULAR: f64 = 1e-9;

impl ArmConfig {
    pub fn left() -> Self {
        Self::default()
    }

    pub fn right() -> Self {
        Self {
            shoulder_offset: -0.2,
            ..Self::default()
        }
    }

    pub fn max_reach(&self) -> f64 {
        self.l1 + self.l2
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let bad = |m: &str| Err(KinematicsError::InvalidConfig(m.into()));
        if !(self.l1 > 0.0 && self.l2 > 0.0) {
            return bad("link lengths must be > 0");
        }
        if !(self.lift_range[0] <= self.lift_range[1]) {
            return bad("lift_range must be ordered");
        }
        let [a, b, c] = self.wrist_axes;
        if a != c || a == b {
            return bad("wrist_axes must be a proper Euler sequence [a, b, a]");
        }
        let jl = &self.joint_limits;
        if [jl.shoulder, jl.elbow, jl.wrist1, jl.wrist2, jl.wrist3]
            .iter()
            .any(|r| !(r[0] <= r[1]))
        {
            return bad("joint limit ranges must be ordered");
        }
        if !(self.gripper_max > 0.0) || !self.shoulder_offset.is_finite() {
            return bad("gripper_max must be > 0 and shoulder_offset finite");
        }
        Ok(())
    }

    /// Basis whose columns are the first, second and (right-handed) third
    /// wrist axes. Conjugating by it turns any `[a, b, a]` sequence into XYX.
    fn wrist_basis(&self) -> Matrix3<f64> {
        let a = self.wrist_axes[0].unit();
        let b = self.wrist_axes[1].unit();
        Matrix3::from_columns(&[a, b, a.cross(&b)])
    }

    fn check_limits(&self, j: &ArmJoints) -> Result<(), KinematicsError> {
        let jl = &self.joint_limits;
        let checks = [
            ("lift", j.lift, self.lift_range),
            ("shoulder", j.shoulder, jl.shoulder),
            ("elbow", j.elbow, jl.elbow),
            ("wrist1", j.wrist1, jl.wrist1),
            ("wrist2", j.wrist2, jl.wrist2),
            ("wrist3", j.wrist3, jl.wrist3),
            ("gripper", j.gripper, [0.0, self.gripper_max]),
        ];
        for (joint, value, [min, max]) in checks {
            if !(value >= min - LIMIT_EPS && value <= max + LIMIT_EPS) {
                return Err(KinematicsError::JointLimit { joint, value, min, max });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmJoints {
    pub lift: f64,
    pub shoulder: f64,
    pub elbow: f64,
    pub wrist1: f64,
    pub wrist2: f64,
    pub wrist3: f64,
    /// Opening (m).
    pub gripper: f64,
}

impl ArmJoints {
    fn revolute(&self) -> [f64; 5] {
        [self.shoulder, self.elbow, self.wrist1, self.wrist2, self.wrist3]
    }
}

fn xyx(a: f64, b: f64, c: f64) -> Matrix3<f64> {
    let rx = |t: f64| *Rotation3::from_axis_angle(&Vector3::x_axis(), t).matrix();
    let ry = |t: f64| *Rotation3::from_axis_angle(&Vector3::y_axis(), t).matrix();
    rx(a) * ry(b) * rx(c)
}

fn wrist_rotation(cfg: &ArmConfig, j: &ArmJoints) -> Matrix3<f64> {
    let q = cfg.wrist_basis();
    q * xyx(j.wrist1, j.wrist2, j.wrist3) * q.transpose()
}

fn planar_point(cfg: &ArmConfig, shoulder: f64, elbow: f64) -> (f64, f64) {
    let se = shoulder + elbow;
    (
        cfg.l1 * shoulder.cos() + cfg.l2 * se.cos(),
        cfg.shoulder_offset + cfg.l1 * shoulder.sin() + cfg.l2 * se.sin(),
    )
}

/// End-effector pose in the body frame.
pub fn arm_fk(j: &ArmJoints, cfg: &ArmConfig) -> Result<Pose6D, KinematicsError> {
    cfg.check_limits(j)?;
    let (x, y) = planar_point(cfg, j.shoulder, j.elbow);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), j.shoulder + j.elbow);
    let r = rz.matrix() * wrist_rotation(cfg, j);
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Pose6D::new(rot, Vector3::new(x, y, j.lift)))
}

fn angle_dist(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Both XYX decompositions of `m`, or a single one when the middle angle is
/// at 0 or π and only the sum or difference of the outer angles is defined.
fn decompose_xyx(m: &Matrix3<f64>, hold_a: f64) -> Vec<[f64; 3]> {
    let s = m[(1, 0)].hypot(m[(2, 0)]);
    let b = s.atan2(m[(0, 0)]);
    if s > WRIST_SINGULAR {
        let a = m[(1, 0)].atan2(-m[(2, 0)]);
        let c = m[(0, 1)].atan2(m[(0, 2)]);
        vec![[a, b, c], [wrap_angle(a + PI), -b, wrap_angle(c + PI)]]
    } else if m[(0, 0)] > 0.0 {
        // Rx(a + c): only the sum is observable.
        let phi = m[(2, 1)].atan2(m[(1, 1)]);
        vec![[hold_a, b, wrap_angle(phi - hold_a)]]
    } else {
        // Rx(a) Ry(π) Rx(c) = Rx(a - c) Ry(π).
        let n = m * Rotation3::from_axis_angle(&Vector3::y_axis(), PI).matrix().transpose();
        let phi = n[(2, 1)].atan2(n[(1, 1)]);
        vec![[hold_a, b, wrap_angle(hold_a - phi)]]
    }
}

/// Closed-form inverse kinematics. The elbow branch and the wrist branch are
/// each chosen to be nearest to `prev`; without `prev` the positive elbow
/// (elbow-down) and non-negative middle wrist angle are used. A degenerate
/// wrist holds `prev.wrist1`.
pub fn arm_ik(target: &Pose6D, cfg: &ArmConfig, prev: Option<&ArmJoints>) -> Result<ArmJoints, KinematicsError> {
    let p = target.translation;
    let [zmin, zmax] = cfg.lift_range;
    if !(p.z >= zmin - LIMIT_EPS && p.z <= zmax + LIMIT_EPS) {
        return Err(KinematicsError::Unreachable(format!(
            "height {:.6} m outside lift range",
            p.z
        )));
    }
    let (px, py) = (p.x, p.y - cfg.shoulder_offset);
    let r = px.hypot(py);
    let (l1, l2) = (cfg.l1, cfg.l2);
    if r > l1 + l2 + REACH_EPS || r < (l1 - l2).abs() - REACH_EPS {
        return Err(KinematicsError::Unreachable(format!(
            "planar distance {r:.6} m outside annulus"
        )));
    }
    let c = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let e0 = ((1.0 - c) * (1.0 + c)).sqrt().atan2(c);
    let hold_shoulder = prev.map_or(0.0, |q| q.shoulder);
    let planar: Vec<(f64, f64)> = [e0, -e0]
        .into_iter()
        .map(|e| {
            let s = if r < 1e-12 {
                hold_shoulder
            } else {
                wrap_angle(py.atan2(px) - (l2 * e.sin()).atan2(l1 + l2 * e.cos()))
            };
            (s, e)
        })
        .collect();

    let q = cfg.wrist_basis();
    let r_target = target.rotation.to_rotation_matrix().into_inner();
    let mut best: Option<(f64, ArmJoints)> = None;
    for (s, e) in planar {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), s + e);
        let m = q.transpose() * rz.matrix().transpose() * r_target * q;
        for [w1, w2, w3] in decompose_xyx(&m, prev.map_or(0.0, |q| q.wrist1)) {
            let cand = ArmJoints {
                lift: p.z.clamp(zmin, zmax),
                shoulder: s,
                elbow: e,
                wrist1: w1,
                wrist2: w2,
                wrist3: w3,
                gripper: prev.map_or(0.0, |q| q.gripper),
            };
            if cfg.check_limits(&cand).is_err() {
                continue;
            }
            let cost = match prev {
                Some(pj) => cand
                    .revolute()
                    .iter()
                    .zip(pj.revolute())
                    .map(|(a, b)| angle_dist(*a, b))
                    .sum(),
                // Prefer elbow >= 0, then wrist2 >= 0.
                None => f64::from(u8::from(e < 0.0)) * 2.0 + f64::from(u8::from(w2 < 0.0)),
            };
            if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                best = Some((cost, cand));
            }
        }
    }
    best.map(|(_, j)| j)
        .ok_or_else(|| KinematicsError::Unreachable("no IK branch within joint limits".into()))
}

/// Planar base pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseParams {
    pub track_width: f64,
    pub wheel_radius: f64,
    pub wheel_counts_per_rev: u32,
    /// m/s
    pub max_speed: f64,
    /// rad/s
    pub max_turn_rate: f64,
}

impl Default for BaseParams {
    fn default() -> Self {
        Self {
            track_width: 0.45,
            wheel_radius: 0.085,
            wheel_counts_per_rev: 64,
            max_speed: 0.5,
            max_turn_rate: 1.5,
        }
    }
}

/// Advance along a circular arc of length `s` turning by `dtheta`.
pub fn base_arc(p: &BasePose, s: f64, dtheta: f64) -> BasePose {
    // Chord of the arc: length s·sinc(dθ/2) along heading + dθ/2. Unlike
    // ρ·(sin(h + dθ) − sin h) this has no cancellation for small dθ.
    let half = 0.5 * dtheta;
    let chord = if half == 0.0 { s } else { s * half.sin() / half };
    let h = p.heading + half;
    let (dx, dy) = (chord * h.cos(), chord * h.sin());
    BasePose {
        x: p.x + dx,
        y: p.y + dy,
        heading: wrap_angle(p.heading + dtheta),
    }
}

/// Unicycle update with exact arc integration.
pub fn base_step(p: &BasePose, v_left: f64, v_right: f64, track_width: f64, dt: f64) -> BasePose {
    let v = 0.5 * (v_left + v_right);
    let w = (v_right - v_left) / track_width;
    base_arc(p, v * dt, w * dt)
}

pub fn wheel_encoder_read(wheel_angle: f64, counts_per_rev: u32) -> i64 {
    quantize(wheel_angle, counts_per_rev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseCommandMode {
    Position,
    Velocity,
}

/// `(arc length, heading change)` connecting two poses joined by a circular
/// arc. The arc length is signed by travel direction.
pub fn arc_between(a: &BasePose, b: &BasePose) -> (f64, f64) {
    let dth = wrap_angle(b.heading - a.heading);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let mid = a.heading + 0.5 * dth;
    let along = dx * mid.cos() + dy * mid.sin();
    let half = 0.5 * dth;
    let s = if half.abs() < 1e-9 {
        along
    } else {
        along * half / half.sin()
    };
    (s, dth)
}

/// Convert a fixed-rate base trajectory into per-step commands: position
/// mode yields `(arc length, heading change)` pairs, velocity mode the same
/// divided by `dt`.
pub fn command_repr_convert(traj: &[BasePose], dt: f64, mode: BaseCommandMode) -> Vec<[f64; 2]> {
    traj.windows(2)
        .map(|w| {
            let (s, dth) = arc_between(&w[0], &w[1]);
            match mode {
                BaseCommandMode::Position => [s, dth],
                BaseCommandMode::Velocity => [s / dt, dth / dt],
            }
        })
        .collect()
}

/// Integrate a position-mode stream from `start`.
pub fn integrate_position_stream(start: &BasePose, stream: &[[f64; 2]]) -> Vec<BasePose> {
    let mut out = Vec::with_capacity(stream.len() + 1);
    out.push(*start);
    let mut p = *start;
    for [s, dth] in stream {
        p = base_arc(&p, *s, *dth);
        out.push(p);
    }
    out
}

/// Dead-reckoning from quantized wheel encoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelOdometry {
    pub pose: BasePose,
    last: Option<(i64, i64)>,
}

impl WheelOdometry {
    pub fn new(pose: BasePose) -> Self {
        Self { pose, last: None }
    }

    /// Feed true wheel angles; only their quantized counts are used.
    pub fn update(&mut self, left_angle: f64, right_angle: f64, params: &BaseParams) -> BasePose {
        let cpr = params.wheel_counts_per_rev;
        let now = (
            wheel_encoder_read(left_angle, cpr),
            wheel_encoder_read(right_angle, cpr),
        );
        if let Some((l0, r0)) = self.last {
            let per_count = 2.0 * PI * params.wheel_radius / f64::from(cpr);
            let dl = (now.0 - l0) as f64 * per_count;
            let dr = (now.1 - r0) as f64 * per_count;
            self.pose = base_arc(&self.pose, 0.5 * (dl + dr), (dr - dl) / params.track_width);
        }
        self.last = Some(now);
        self.pose
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadLimits {
    pub pan: [f64; 2],
    pub tilt: [f64; 2],
}

impl Default for HeadLimits {
    fn default() -> Self {
        Self {
            pan: [-PI / 2.0, PI / 2.0],
            tilt: [-PI / 3.0, PI / 6.0],
        }
    }
}

/// Whole-robot geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    pub left: ArmConfig,
    pub right: ArmConfig,
    pub head: HeadLimits,
    pub base: BaseParams,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            left: ArmConfig::left(),
            right: ArmConfig::right(),
            head: HeadLimits::default(),
            base: BaseParams::default(),
        }
    }
}

impl RobotConfig {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        self.left.validate()?;
        self.right.validate()?;
        let b = &self.base;
        if !(b.track_width > 0.0
            && b.wheel_radius > 0.0
            && b.wheel_counts_per_rev >= 1
            && b.max_speed > 0.0
            && b.max_turn_rate > 0.0)
        {
            return Err(KinematicsError::InvalidConfig(
                "base parameters must be positive".into(),
            ));
        }
        if self.left.lift_range != self.right.lift_range {
            return Err(KinematicsError::InvalidConfig("both arms share one lift range".into()));
        }
        Ok(())
    }

    pub fn arm(&self, side: Side) -> &ArmConfig {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    /// Per-slot `[min, max]` for a command issued once per `tick` seconds.
    pub fn command_limits(&self, tick: f64) -> [[f64; 2]; 18] {
        let mut lim = [[0.0; 2]; 18];
        lim[slot::LIFT] = self.left.lift_range;
        for side in [Side::Left, Side::Right] {
            let a = self.arm(side);
            let jl = &a.joint_limits;
            let base = slot::arm_base(side);
            lim[base] = jl.shoulder;
            lim[base + 1] = jl.elbow;
            lim[base + 2] = jl.wrist1;
            lim[base + 3] = jl.wrist2;
            lim[base + 4] = jl.wrist3;
            lim[slot::gripper(side)] = [0.0, a.gripper_max];
        }
        lim[slot::HEAD_PAN] = self.head.pan;
        lim[slot::HEAD_TILT] = self.head.tilt;
        let ds = self.base.max_speed * tick;
        let dth = self.base.max_turn_rate * tick;
        lim[slot::BASE_FORWARD] = [-ds, ds];
        lim[slot::BASE_TURN] = [-dth, dth];
        lim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Slot map of [`RobotCommand18`]. Frozen: the wire schema publishes it.
pub mod slot {
    use super::Side;

    pub const LIFT: usize = 0;
    pub const LEFT_SHOULDER: usize = 1;
    pub const LEFT_ELBOW: usize = 2;
    pub const LEFT_WRIST: [usize; 3] = [3, 4, 5];
    pub const LEFT_GRIPPER: usize = 6;
    pub const RIGHT_SHOULDER: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const RIGHT_WRIST: [usize; 3] = [9, 10, 11];
    pub const RIGHT_GRIPPER: usize = 12;
    pub const HEAD_PAN: usize = 13;
    pub const HEAD_TILT: usize = 14;
    pub const RESERVED: usize = 15;
    /// Arc length per tick (m).
    pub const BASE_FORWARD: usize = 16;
    /// Heading change per tick (rad).
    pub const BASE_TURN: usize = 17;

    pub const NAMES: [&str; 18] = [
        "lift",
        "left_shoulder",
        "left_elbow",
        "left_wrist1",
        "left_wrist2",
        "left_wrist3",
        "left_gripper",
        "right_shoulder",
        "right_elbow",
        "right_wrist1",
        "right_wrist2",
        "right_wrist3",
        "right_gripper",
        "head_pan",
        "head_tilt",
        "reserved",
        "base_forward",
        "base_turn",
    ];

    pub fn arm_base(side: Side) -> usize {
        match side {
            Side::Left => LEFT_SHOULDER,
            Side::Right => RIGHT_SHOULDER,
        }
    }

    pub fn gripper(side: Side) -> usize {
        match side {
            Side::Left => LEFT_GRIPPER,
            Side::Right => RIGHT_GRIPPER,
        }
    }
}

/// Whole-body state or command. Base slots carry per-tick displacements.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RobotCommand18(pub [f64; 18]);

impl RobotCommand18 {
    pub fn arm(&self, side: Side) -> ArmJoints {
        let b = slot::arm_base(side);
        let v = &self.0;
        ArmJoints {
            lift: v[slot::LIFT],
            shoulder: v[b],
            elbow: v[b + 1],
            wrist1: v[b + 2],
            wrist2: v[b + 3],
            wrist3: v[b + 4],
            gripper: v[slot::gripper(side)],
        }
    }

    /// Writes the arm block and gripper; the lift slot is left alone since
    /// both arms share it.
    pub fn set_arm(&mut self, side: Side, j: &ArmJoints) {
        let b = slot::arm_base(side);
        self.0[b..b + 5].copy_from_slice(&j.revolute());
        self.0[slot::gripper(side)] = j.gripper;
    }

    pub fn base(&self) -> [f64; 2] {
        [self.0[slot::BASE_FORWARD], self.0[slot::BASE_TURN]]
    }

    /// First slot outside its limit, if any.
    pub fn check(&self, limits: &[[f64; 2]; 18]) -> Result<(), usize> {
        match self
            .0
            .iter()
            .zip(limits)
            .position(|(v, [lo, hi])| !(*v >= lo - LIMIT_EPS && *v <= hi + LIMIT_EPS))
        {
            Some(i) => Err(i),
            None if self.0[slot::RESERVED] != 0.0 => Err(slot::RESERVED),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn j(lift: f64, shoulder: f64, elbow: f64) -> ArmJoints {
        ArmJoints {
            lift,
            shoulder,
            elbow,
            ..Default::default()
        }
    }

    fn centered() -> ArmConfig {
        ArmConfig {
            shoulder_offset: 0.0,
            ..ArmConfig::default()
        }
    }

    #[test]
    fn fk_examples() {
        let cfg = centered();
        let p = arm_fk(&j(0.5, 0.0, 0.0), &cfg).unwrap();
        assert!((p.translation - Vector3::new(0.75, 0.0, 0.5)).norm() < 1e-15);
        assert!(p.rotation.angle() < 1e-15);
        let p = arm_fk(&j(0.5, 0.0, PI), &cfg).unwrap();
        assert!(p.translation.xy().norm() < 1e-15);
        let p = arm_fk(&j(0.5, 0.0, PI / 2.0), &cfg).unwrap();
        assert!((p.translation.xy() - nalgebra::Vector2::new(0.375, 0.375)).norm() < 1e-15);
        assert!(matches!(
            arm_fk(&j(2.0, 0.0, 0.0), &cfg),
            Err(KinematicsError::JointLimit { joint: "lift", .. })
        ));
    }

    #[test]
    fn ik_examples() {
        let cfg = centered();
        let q = arm_ik(&Pose6D::from_translation(0.75, 0.0, 0.3), &cfg, None).unwrap();
        assert!(q.shoulder.abs() < 1e-12 && q.elbow.abs() < 1e-7);
        let q = arm_ik(
            &Pose6D::new(
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI / 2.0),
                Vector3::new(0.375, 0.375, 0.3),
            ),
            &cfg,
            None,
        )
        .unwrap();
        assert!(q.shoulder.abs() < 1e-12 && (q.elbow - PI / 2.0).abs() < 1e-12);
        assert!(q.wrist1.abs() < 1e-12 && q.wrist2.abs() < 1e-12 && q.wrist3.abs() < 1e-12);
        assert!(matches!(
            arm_ik(&Pose6D::from_translation(0.8, 0.0, 0.3), &cfg, None),
            Err(KinematicsError::Unreachable(_))
        ));
        assert!(matches!(
            arm_ik(&Pose6D::from_translation(0.5, 0.0, 1.3), &cfg, None),
            Err(KinematicsError::Unreachable(_))
        ));
    }

    #[test]
    fn ik_follows_prev_elbow_branch() {
        let cfg = ArmConfig::default();
        let target = arm_fk(&j(0.4, 0.7, -1.1), &cfg).unwrap();
        let free = arm_ik(&target, &cfg, None).unwrap();
        assert!(free.elbow > 0.0);
        let seeded = arm_ik(&target, &cfg, Some(&j(0.4, 0.6, -1.0))).unwrap();
        assert!((seeded.elbow + 1.1).abs() < 1e-9 && (seeded.shoulder - 0.7).abs() < 1e-9);
    }

    #[test]
    fn wrist_singularity_holds_prev_roll() {
        let cfg = centered();
        let mut q0 = j(0.3, 0.2, 0.9);
        q0.wrist1 = 0.4;
        q0.wrist3 = 0.3;
        let target = arm_fk(&q0, &cfg).unwrap();
        let q = arm_ik(&target, &cfg, Some(&q0)).unwrap();
        assert!((q.wrist1 - 0.4).abs() < 1e-12 && (q.wrist3 - 0.3).abs() < 1e-9);
        let back = arm_fk(&q, &cfg).unwrap();
        assert!(crate::pose::rotation_angle(&back.rotation, &target.rotation) < 1e-12);
    }

    #[test]
    fn other_wrist_sequences_round_trip() {
        let cfg = ArmConfig {
            wrist_axes: [Axis::Z, Axis::Y, Axis::Z],
            ..ArmConfig::default()
        };
        let mut q0 = j(0.3, 0.2, 0.9);
        (q0.wrist1, q0.wrist2, q0.wrist3) = (0.5, -0.7, 1.2);
        let target = arm_fk(&q0, &cfg).unwrap();
        let q = arm_ik(&target, &cfg, None).unwrap();
        let back = arm_fk(&q, &cfg).unwrap();
        let (r, t) = crate::pose::pose_error(&back, &target);
        assert!(r < 1e-9 && t < 1e-9);
        assert!(ArmConfig {
            wrist_axes: [Axis::X, Axis::Y, Axis::Z],
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn base_examples() {
        let p = base_step(&BasePose::default(), 0.1, 0.1, 0.45, 1.0);
        assert!((p.x - 0.1).abs() < 1e-15 && p.y == 0.0);
        let p = base_step(&BasePose::default(), -0.2, 0.2, 0.45, 1.0);
        assert!(p.x.abs() < 1e-15 && p.y.abs() < 1e-15 && p.heading > 0.0);
        // Quarter circle: v = 0.3, ω·dt = π/2, radius v/ω.
        let w = PI / 2.0;
        let track = 0.45;
        let v = 0.3;
        let (vl, vr) = (v - w * track / 2.0, v + w * track / 2.0);
        let p = base_step(&BasePose::default(), vl, vr, track, 1.0);
        let rho = v / w;
        assert!((p.x - rho).abs() < 1e-15 && (p.y - rho).abs() < 1e-15);
        assert!((p.heading - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn wheel_encoder_examples() {
        assert_eq!(wheel_encoder_read(0.0, 64), 0);
        assert_eq!(wheel_encoder_read(2.0 * PI, 64), 64);
        assert_eq!(wheel_encoder_read(PI / 64.0, 64), 0);
    }

    #[test]
    fn straight_line_position_stream() {
        let traj: Vec<BasePose> = (0..20)
            .map(|k| BasePose {
                x: 0.01 * f64::from(k),
                ..Default::default()
            })
            .collect();
        let s = command_repr_convert(&traj, 1.0 / 30.0, BaseCommandMode::Position);
        assert!(s.iter().all(|c| (c[0] - 0.01).abs() < 1e-15 && c[1] == 0.0));
        let back = integrate_position_stream(&traj[0], &s);
        assert!((back[19].x - traj[19].x).abs() < 1e-15);
    }

    #[test]
    fn command_slots() {
        let mut c = RobotCommand18::default();
        let a = ArmJoints {
            lift: 0.0,
            shoulder: 0.1,
            elbow: 0.2,
            wrist1: 0.3,
            wrist2: 0.4,
            wrist3: 0.5,
            gripper: 0.06,
        };
        c.set_arm(Side::Right, &a);
        assert_eq!(c.0[7..13], [0.1, 0.2, 0.3, 0.4, 0.5, 0.06]);
        assert_eq!(c.arm(Side::Right), a);
        let lim = RobotConfig::default().command_limits(1.0 / 30.0);
        assert!(c.check(&lim).is_ok());
        c.0[slot::RESERVED] = 1e-3;
        assert_eq!(c.check(&lim), Err(slot::RESERVED));
        c.0[slot::RESERVED] = 0.0;
        c.0[slot::RIGHT_GRIPPER] = 0.2;
        assert_eq!(c.check(&lim), Err(slot::RIGHT_GRIPPER));
    }
}
