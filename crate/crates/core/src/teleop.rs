//! Operator-side teleoperation: keys and pedals, clutch retargeting of the
//! handle poses, 18-slot command assembly and a rate-limited kinematic world.

use crate::kinematics::{arm_fk, arm_ik, base_arc, slot, ArmJoints, BasePose, RobotCommand18, RobotConfig, Side};
use crate::marker::PoseEstimate;
use crate::pose::{rotation_angle, Pose6D};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeleopMode {
    #[default]
    Walking,
    Operation,
}

impl TeleopMode {
    pub fn toggled(self) -> Self {
        match self {
            TeleopMode::Walking => TeleopMode::Operation,
            TeleopMode::Operation => TeleopMode::Walking,
        }
    }
}

/// Analog pedal depressions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PedalState(pub [f64; 4]);

impl PedalState {
    /// Clamp into `[0, 1]`; non-finite values read as released.
    pub fn sanitized(&self) -> Self {
        Self(self.0.map(|p| if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 }))
    }
}

fn hand(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

pub const SIDES: [Side; 2] = [Side::Left, Side::Right];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyBindings {
    pub toggle_mode: String,
    pub lock_left: String,
    pub lock_right: String,
    pub reset_left: String,
    pub reset_right: String,
    pub clutch_left: String,
    pub clutch_right: String,
}

impl Default for KeyBindings {
    fn default() -> Self {
        Self {
            toggle_mode: "m".into(),
            lock_left: "z".into(),
            lock_right: "c".into(),
            reset_left: "r".into(),
            reset_right: "u".into(),
            clutch_left: "a".into(),
            clutch_right: "d".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityLimits {
    /// m/s
    pub lift: f64,
    /// rad/s, shoulder and elbow
    pub arm: f64,
    /// rad/s
    pub wrist: f64,
    /// m/s
    pub gripper: f64,
    /// rad/s
    pub head: f64,
}

impl Default for VelocityLimits {
    fn default() -> Self {
        Self {
            lift: 0.2,
            arm: 2.0,
            wrist: 3.0,
            gripper: 0.25,
            head: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopConfig {
    pub tick_hz: f64,
    /// Handle translation → end-effector translation.
    pub translation_scale: f64,
    /// Estimates with a larger RMS reprojection error are rejected (px).
    pub max_rms_px: f64,
    /// Estimates older than this many ticks are stale.
    pub stale_ticks: f64,
    /// Physical bounds on handle motion; faster apparent jumps are rejected.
    pub handle_speed: f64,
    pub handle_angular_speed: f64,
    /// Lift pedal rate at full depression (m/s).
    pub lift_pedal_speed: f64,
    /// Rows map tracker-camera axes into the robot body frame.
    pub camera_to_body: [[f64; 3]; 3],
    pub bindings: KeyBindings,
    pub velocity: VelocityLimits,
    pub home_left: ArmJoints,
    pub home_right: ArmJoints,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        let home = |sign: f64| ArmJoints {
            lift: 0.0,
            shoulder: 0.3 * sign,
            elbow: 1.5 * sign,
            ..Default::default()
        };
        Self {
            tick_hz: 30.0,
            translation_scale: 1.0,
            max_rms_px: 3.0,
            stale_ticks: 2.0,
            handle_speed: 1.0,
            handle_angular_speed: 2.0 * PI,
            lift_pedal_speed: 0.15,
            // The tracker camera faces the operator: pushing the handle
            // toward it (-z) is forward, image right (+x) is body left.
            camera_to_body: [[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
            bindings: KeyBindings::default(),
            velocity: VelocityLimits::default(),
            home_left: home(1.0),
            home_right: home(-1.0),
        }
    }
}

impl TeleopConfig {
    pub fn tick(&self) -> f64 {
        1.0 / self.tick_hz
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.tick_hz > 0.0 && self.translation_scale > 0.0 && self.max_rms_px > 0.0 && self.stale_ticks >= 0.0) {
            return Err("tick_hz, translation_scale, max_rms_px must be > 0".into());
        }
        if !(self.handle_speed > 0.0 && self.handle_angular_speed > 0.0 && self.lift_pedal_speed > 0.0) {
            return Err("speed bounds must be > 0".into());
        }
        let v = &self.velocity;
        if ![v.lift, v.arm, v.wrist, v.gripper, v.head].iter().all(|x| *x > 0.0) {
            return Err("velocity limits must be > 0".into());
        }
        let m = self.camera_matrix();
        if ((m * m.transpose()) - Matrix3::identity()).norm() > 1e-9 || m.determinant() < 0.0 {
            return Err("camera_to_body must be a rotation".into());
        }
        Ok(())
    }

    fn camera_matrix(&self) -> Matrix3<f64> {
        let r = &self.camera_to_body;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn home(&self, side: Side) -> ArmJoints {
        match side {
            Side::Left => self.home_left,
            Side::Right => self.home_right,
        }
    }
}

/// Handle and end-effector poses captured when a clutch engages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClutchReference {
    pub handle: Pose6D,
    pub ee: Pose6D,
}

/// Last handle estimate that passed every filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptedHandle {
    pub pose: Pose6D,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TeleopState {
    pub mode: TeleopMode,
    pub gripper_locked: [bool; 2],
    pub clutch_engaged: [bool; 2],
    /// Captured on the first usable estimate after the clutch engages, so a
    /// reference implies an engaged clutch but not the other way round.
    pub reference: [Option<ClutchReference>; 2],
    pub last_target: [Option<Pose6D>; 2],
    pub last_handle: [Option<AcceptedHandle>; 2],
    /// Set by the reset key; the next assembled command re-homes the arm.
    pub rehome: [bool; 2],
    pub last_command: RobotCommand18,
}

impl TeleopState {
    pub fn new(initial: RobotCommand18) -> Self {
        Self {
            last_command: initial,
            ..Default::default()
        }
    }

    fn disengage(&mut self, i: usize) {
        self.clutch_engaged[i] = false;
        self.reference[i] = None;
        self.last_target[i] = None;
        self.last_handle[i] = None;
    }
}

/// Apply one key press. Unbound keys leave the state unchanged.
pub fn handle_key(state: &TeleopState, key: &str, b: &KeyBindings) -> TeleopState {
    let mut s = state.clone();
    if key == b.toggle_mode {
        s.mode = s.mode.toggled();
    } else if key == b.lock_left || key == b.lock_right {
        let i = usize::from(key == b.lock_right);
        s.gripper_locked[i] = !s.gripper_locked[i];
    } else if key == b.reset_left || key == b.reset_right {
        let i = usize::from(key == b.reset_right);
        s.disengage(i);
        s.rehome[i] = true;
    } else if key == b.clutch_left || key == b.clutch_right {
        let i = usize::from(key == b.clutch_right);
        if s.clutch_engaged[i] {
            s.disengage(i);
        } else {
            s.clutch_engaged[i] = true;
        }
    }
    s
}

/// Per-tick contributions from the pedals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartialCommand {
    /// Base arc length this tick (m).
    pub base_forward: f64,
    /// Base heading change this tick (rad).
    pub base_turn: f64,
    /// Lift change this tick (m).
    pub lift_delta: f64,
    /// Gripper opening targets; `None` holds.
    pub gripper: [Option<f64>; 2],
}

/// Walking: p1/p2 forward/back, p3/p4 turn left/right. Operation: p1/p2
/// left/right gripper opening, p3/p4 lift up/down.
pub fn pedal_map(state: &TeleopState, pedals: &PedalState, robot: &RobotConfig, cfg: &TeleopConfig) -> PartialCommand {
    let [p1, p2, p3, p4] = pedals.sanitized().0;
    let dt = cfg.tick();
    match state.mode {
        TeleopMode::Walking => PartialCommand {
            base_forward: (p1 - p2) * robot.base.max_speed * dt,
            base_turn: (p3 - p4) * robot.base.max_turn_rate * dt,
            ..Default::default()
        },
        TeleopMode::Operation => {
            let open = |i: usize, p: f64| (!state.gripper_locked[i]).then(|| p * robot.arm(SIDES[i]).gripper_max);
            PartialCommand {
                lift_delta: (p3 - p4) * cfg.lift_pedal_speed * dt,
                gripper: [open(0, p1), open(1, p2)],
                ..Default::default()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetargetStatus {
    Disengaged,
    /// Clutch reference captured; target equals the captured EE pose.
    Captured,
    Accepted,
    RejectedAmbiguous,
    RejectedResidual,
    RejectedSpeed,
    Stale,
}

/// Map a handle estimate to an end-effector target through the clutch.
///
/// Translation moves by `translation_scale` times the handle displacement
/// since engage, rotated into the body frame; rotation follows 1:1. When
/// the estimate is rejected the previous target is returned.
pub fn retarget(
    state: &TeleopState,
    side: Side,
    est: &PoseEstimate,
    ee_now: &Pose6D,
    now: f64,
    cfg: &TeleopConfig,
) -> (TeleopState, Option<Pose6D>, RetargetStatus) {
    let i = hand(side);
    if !state.clutch_engaged[i] {
        return (state.clone(), None, RetargetStatus::Disengaged);
    }
    let hold = |status| (state.clone(), state.last_target[i], status);
    if now - est.timestamp > cfg.stale_ticks * cfg.tick() + 1e-9 {
        return hold(RetargetStatus::Stale);
    }
    if est.ambiguity_flag {
        return hold(RetargetStatus::RejectedAmbiguous);
    }
    if !(est.rms_reprojection <= cfg.max_rms_px) || !est.pose.is_finite() {
        return hold(RetargetStatus::RejectedResidual);
    }
    if let Some(prev) = state.last_handle[i] {
        let dt = (est.timestamp - prev.t).max(cfg.tick());
        let jump = (est.pose.translation - prev.pose.translation).norm();
        let turn = rotation_angle(&est.pose.rotation, &prev.pose.rotation);
        if jump > cfg.handle_speed * dt || turn > cfg.handle_angular_speed * dt {
            return hold(RetargetStatus::RejectedSpeed);
        }
    }
    let mut s = state.clone();
    s.last_handle[i] = Some(AcceptedHandle {
        pose: est.pose,
        t: est.timestamp,
    });
    let Some(reference) = state.reference[i] else {
        s.reference[i] = Some(ClutchReference {
            handle: est.pose,
            ee: *ee_now,
        });
        s.last_target[i] = Some(*ee_now);
        return (s, Some(*ee_now), RetargetStatus::Captured);
    };
    let c = cfg.camera_matrix();
    let dp = c * (est.pose.translation - reference.handle.translation) * cfg.translation_scale;
    let dr_cam = (est.pose.rotation * reference.handle.rotation.inverse())
        .to_rotation_matrix()
        .into_inner();
    let dr = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(c * dr_cam * c.transpose()));
    let target = Pose6D::new(dr * reference.ee.rotation, reference.ee.translation + dp);
    s.last_target[i] = Some(target);
    (s, Some(target), RetargetStatus::Accepted)
}

/// Kinematic stand-in for the robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub base: BasePose,
    pub lift: f64,
    pub left: ArmJoints,
    pub right: ArmJoints,
    pub head_pan: f64,
    pub head_tilt: f64,
    pub time: f64,
    /// Base displacement executed on the last step.
    pub last_base: [f64; 2],
}

impl SimWorld {
    pub fn new(cfg: &TeleopConfig, lift: f64) -> Self {
        let mut w = Self {
            base: BasePose::default(),
            lift,
            left: cfg.home_left,
            right: cfg.home_right,
            head_pan: 0.0,
            head_tilt: 0.0,
            time: 0.0,
            last_base: [0.0; 2],
        };
        w.left.lift = lift;
        w.right.lift = lift;
        w
    }

    pub fn arm(&self, side: Side) -> ArmJoints {
        let mut a = match side {
            Side::Left => self.left,
            Side::Right => self.right,
        };
        a.lift = self.lift;
        a
    }

    /// 18-slot state; base slots hold the displacement of the last step.
    pub fn state_vector(&self) -> RobotCommand18 {
        let mut c = RobotCommand18::default();
        c.0[slot::LIFT] = self.lift;
        c.set_arm(Side::Left, &self.left);
        c.set_arm(Side::Right, &self.right);
        c.0[slot::HEAD_PAN] = self.head_pan;
        c.0[slot::HEAD_TILT] = self.head_tilt;
        c.0[slot::BASE_FORWARD] = self.last_base[0];
        c.0[slot::BASE_TURN] = self.last_base[1];
        c
    }

    /// Keep every joint where it is and the base still.
    pub fn hold_command(&self) -> RobotCommand18 {
        let mut c = self.state_vector();
        c.0[slot::BASE_FORWARD] = 0.0;
        c.0[slot::BASE_TURN] = 0.0;
        c
    }

    pub fn ee_pose(&self, side: Side, robot: &RobotConfig) -> Option<Pose6D> {
        arm_fk(&self.arm(side), robot.arm(side)).ok()
    }
}

/// Why part of a command fell back to holding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyNote {
    pub side: Side,
    pub reason: String,
}

/// Build the 18-slot command from arm targets and pedal contributions.
/// Unreachable targets hold that arm. The shared lift follows the pedals,
/// or in operation mode the left target's height (right if only the right
/// hand is active); each arm is solved at the commanded lift.
pub fn assemble_command(
    world: &SimWorld,
    state: &TeleopState,
    targets: [Option<Pose6D>; 2],
    partial: &PartialCommand,
    robot: &RobotConfig,
    cfg: &TeleopConfig,
) -> (RobotCommand18, Vec<AssemblyNote>) {
    let hold = world.hold_command();
    let mut cmd = hold;
    let mut notes = Vec::new();
    let [lmin, lmax] = robot.left.lift_range;
    let operation = state.mode == TeleopMode::Operation;
    let hand_lift = targets.iter().flatten().next().map(|t| t.translation.z);
    cmd.0[slot::LIFT] = match (operation, hand_lift) {
        (true, Some(z)) => z,
        (true, None) => hold.0[slot::LIFT] + partial.lift_delta,
        (false, _) => hold.0[slot::LIFT],
    }
    .clamp(lmin, lmax);
    let lift = cmd.0[slot::LIFT];
    for side in SIDES {
        let i = hand(side);
        let current = world.arm(side);
        let mut joints = current;
        if state.rehome[i] {
            joints = cfg.home(side);
        } else if let Some(mut t) = targets[i] {
            t.translation.z = lift;
            match arm_ik(&t, robot.arm(side), Some(&current)) {
                Ok(j) => joints = j,
                Err(e) => notes.push(AssemblyNote {
                    side,
                    reason: e.to_string(),
                }),
            }
        }
        joints.gripper = match (operation, partial.gripper[i]) {
            (true, Some(g)) => g,
            _ => current.gripper,
        };
        cmd.set_arm(side, &joints);
    }
    if !operation {
        cmd.0[slot::BASE_FORWARD] = partial.base_forward;
        cmd.0[slot::BASE_TURN] = partial.base_turn;
    }
    (cmd, notes)
}

fn approach(current: f64, target: f64, max_step: f64) -> f64 {
    let d = target - current;
    if d.abs() <= max_step {
        target
    } else {
        current + max_step * d.signum()
    }
}

/// Move every joint toward its command at no more than its velocity limit
/// and drive the base by the commanded per-tick displacement (clamped).
pub fn world_step(
    world: &SimWorld,
    cmd: &RobotCommand18,
    dt: f64,
    robot: &RobotConfig,
    limits: &VelocityLimits,
) -> SimWorld {
    let c = &cmd.0;
    let mut w = *world;
    let [lmin, lmax] = robot.left.lift_range;
    w.lift = approach(w.lift, c[slot::LIFT].clamp(lmin, lmax), limits.lift * dt);
    for side in SIDES {
        let target = cmd.arm(side);
        let a = match side {
            Side::Left => &mut w.left,
            Side::Right => &mut w.right,
        };
        a.shoulder = approach(a.shoulder, target.shoulder, limits.arm * dt);
        a.elbow = approach(a.elbow, target.elbow, limits.arm * dt);
        a.wrist1 = approach(a.wrist1, target.wrist1, limits.wrist * dt);
        a.wrist2 = approach(a.wrist2, target.wrist2, limits.wrist * dt);
        a.wrist3 = approach(a.wrist3, target.wrist3, limits.wrist * dt);
        let gmax = robot.arm(side).gripper_max;
        a.gripper = approach(a.gripper, target.gripper.clamp(0.0, gmax), limits.gripper * dt);
        a.lift = w.lift;
    }
    w.head_pan = approach(
        w.head_pan,
        c[slot::HEAD_PAN].clamp(robot.head.pan[0], robot.head.pan[1]),
        limits.head * dt,
    );
    w.head_tilt = approach(
        w.head_tilt,
        c[slot::HEAD_TILT].clamp(robot.head.tilt[0], robot.head.tilt[1]),
        limits.head * dt,
    );
    let ds_max = robot.base.max_speed * dt;
    let dth_max = robot.base.max_turn_rate * dt;
    let ds = c[slot::BASE_FORWARD].clamp(-ds_max, ds_max);
    let dth = c[slot::BASE_TURN].clamp(-dth_max, dth_max);
    w.base = base_arc(&w.base, ds, dth);
    w.last_base = [ds, dth];
    w.time += dt;
    w
}

/// Inputs gathered for one teleop tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TickInput {
    pub keys: Vec<String>,
    pub pedals: PedalState,
    pub estimates: [Option<PoseEstimate>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickOutput {
    /// World state the command was computed from.
    pub state: RobotCommand18,
    pub command: RobotCommand18,
    pub status: [RetargetStatus; 2],
    pub notes: Vec<AssemblyNote>,
}

/// Single owner of the teleop state and the simulated robot.
#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub state: TeleopState,
    pub world: SimWorld,
    pub robot: RobotConfig,
    pub cfg: TeleopConfig,
}

impl Pilot {
    pub fn new(robot: RobotConfig, cfg: TeleopConfig, initial_lift: f64) -> Self {
        let world = SimWorld::new(&cfg, initial_lift);
        Self {
            state: TeleopState::new(world.hold_command()),
            world,
            robot,
            cfg,
        }
    }

    /// Commanded end-effector pose: the clutch reference for re-engaging.
    fn commanded_ee(&self, side: Side) -> Pose6D {
        arm_fk(&self.state.last_command.arm(side), self.robot.arm(side))
            .or_else(|_| arm_fk(&self.world.arm(side), self.robot.arm(side)))
            .unwrap_or_default()
    }

    pub fn tick(&mut self, input: &TickInput) -> TickOutput {
        let now = self.world.time;
        for k in &input.keys {
            self.state = handle_key(&self.state, k, &self.cfg.bindings);
        }
        let partial = pedal_map(&self.state, &input.pedals, &self.robot, &self.cfg);
        if self.state.mode == TeleopMode::Operation && partial.lift_delta != 0.0 {
            // The lift pedal carries engaged hands with it.
            for r in self.state.reference.iter_mut().flatten() {
                r.ee.translation.z += partial.lift_delta;
            }
            for t in self.state.last_target.iter_mut().flatten() {
                t.translation.z += partial.lift_delta;
            }
        }
        let mut targets = [None, None];
        let mut status = [RetargetStatus::Disengaged; 2];
        for side in SIDES {
            let i = hand(side);
            match &input.estimates[i] {
                Some(est) => {
                    let ee = self.commanded_ee(side);
                    let (s, t, st) = retarget(&self.state, side, est, &ee, now, &self.cfg);
                    self.state = s;
                    targets[i] = t;
                    status[i] = st;
                }
                None if self.state.clutch_engaged[i] => {
                    targets[i] = self.state.last_target[i];
                    status[i] = RetargetStatus::Stale;
                }
                None => {}
            }
        }
        let (command, notes) = assemble_command(&self.world, &self.state, targets, &partial, &self.robot, &self.cfg);
        self.state.rehome = [false; 2];
        self.apply(command, notes, status)
    }

    /// Tick with no operator input at all: repeat the last command with the
    /// base stopped. Nothing is extrapolated.
    pub fn hold_tick(&mut self) -> TickOutput {
        let mut command = self.state.last_command;
        command.0[slot::BASE_FORWARD] = 0.0;
        command.0[slot::BASE_TURN] = 0.0;
        self.apply(command, Vec::new(), [RetargetStatus::Stale; 2])
    }

    fn apply(&mut self, command: RobotCommand18, notes: Vec<AssemblyNote>, status: [RetargetStatus; 2]) -> TickOutput {
        let state = self.world.state_vector();
        self.world = world_step(&self.world, &command, self.cfg.tick(), &self.robot, &self.cfg.velocity);
        self.state.last_command = command;
        TickOutput {
            state,
            command,
            status,
            notes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn setup() -> (RobotConfig, TeleopConfig) {
        (RobotConfig::default(), TeleopConfig::default())
    }

    fn est(pose: Pose6D, t: f64) -> PoseEstimate {
        PoseEstimate {
            pose,
            rms_reprojection: 0.2,
            n_tags_used: 4,
            ambiguity_flag: false,
            converged: true,
            timestamp: t,
        }
    }

    #[test]
    fn keys() {
        let b = KeyBindings::default();
        let s = TeleopState::default();
        assert_eq!(handle_key(&s, "m", &b).mode, TeleopMode::Operation);
        assert_eq!(handle_key(&s, "F13", &b), s);
        let locked = handle_key(&s, "z", &b);
        assert!(locked.gripper_locked[0] && !locked.gripper_locked[1]);
        let engaged = handle_key(&s, "a", &b);
        assert!(engaged.clutch_engaged[0]);
        let reset = handle_key(&engaged, "r", &b);
        assert!(!reset.clutch_engaged[0] && reset.rehome[0]);
    }

    #[test]
    fn pedals() {
        let (robot, cfg) = setup();
        let mut s = TeleopState {
            mode: TeleopMode::Operation,
            ..Default::default()
        };
        let p = pedal_map(&s, &PedalState([1.0, 0.0, 0.0, 0.0]), &robot, &cfg);
        assert_eq!(p.gripper[0], Some(0.12));
        s.gripper_locked[1] = true;
        let p = pedal_map(&s, &PedalState([0.0, 1.0, 0.0, 0.0]), &robot, &cfg);
        assert_eq!(p.gripper[1], None);
        s.mode = TeleopMode::Walking;
        let p = pedal_map(&s, &PedalState([0.0, 0.0, 0.5, 0.5]), &robot, &cfg);
        assert_eq!(p.base_turn, 0.0);
        assert_eq!(p.gripper, [None, None]);
    }

    #[test]
    fn clutch_identity_and_translation() {
        let (_, cfg) = setup();
        let mut s = TeleopState::default();
        s.clutch_engaged[0] = true;
        let ee = Pose6D::from_translation(0.5, 0.2, 0.8);
        let handle = Pose6D::from_translation(0.0, 0.0, 0.5);
        let (s, t, st) = retarget(&s, Side::Left, &est(handle, 0.0), &ee, 0.0, &cfg);
        assert_eq!((t, st), (Some(ee), RetargetStatus::Captured));
        let (s, t, _) = retarget(&s, Side::Left, &est(handle, 0.1), &ee, 0.1, &cfg);
        assert_eq!(t, Some(ee));
        let moved = Pose6D::from_translation(0.1, 0.0, 0.5);
        let (_, t, st) = retarget(&s, Side::Left, &est(moved, 0.2), &ee, 0.2, &cfg);
        assert_eq!(st, RetargetStatus::Accepted);
        let d = t.unwrap().translation - ee.translation;
        assert!((d - Vector3::new(0.0, 0.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn flagged_and_stale_estimates_hold() {
        let (_, cfg) = setup();
        let mut s = TeleopState::default();
        s.clutch_engaged[1] = true;
        let ee = Pose6D::from_translation(0.5, -0.2, 0.8);
        let h = Pose6D::from_translation(0.0, 0.0, 0.5);
        let (s, _, _) = retarget(&s, Side::Right, &est(h, 0.0), &ee, 0.0, &cfg);
        let mut bad = est(Pose6D::from_translation(0.05, 0.0, 0.5), 0.1);
        bad.ambiguity_flag = true;
        let (s2, t, st) = retarget(&s, Side::Right, &bad, &ee, 0.1, &cfg);
        assert_eq!((t, st), (Some(ee), RetargetStatus::RejectedAmbiguous));
        assert_eq!(s2, s);
        let (_, t, st) = retarget(&s, Side::Right, &est(h, 0.0), &ee, 0.1, &cfg);
        assert_eq!((t, st), (Some(ee), RetargetStatus::Stale));
        let (_, _, st) = retarget(
            &s,
            Side::Right,
            &est(Pose6D::from_translation(0.5, 0.0, 0.5), 0.033),
            &ee,
            0.033,
            &cfg,
        );
        assert_eq!(st, RetargetStatus::RejectedSpeed);
        let (_, t, st) = retarget(&TeleopState::default(), Side::Left, &est(h, 0.0), &ee, 0.0, &cfg);
        assert_eq!((t, st), (None, RetargetStatus::Disengaged));
    }

    #[test]
    fn assemble_hold_and_isolation() {
        let (robot, cfg) = setup();
        let world = SimWorld::new(&cfg, 0.8);
        let s = TeleopState::new(world.hold_command());
        let (cmd, notes) = assemble_command(&world, &s, [None, None], &PartialCommand::default(), &robot, &cfg);
        assert_eq!(cmd, world.hold_command());
        assert!(notes.is_empty());
        let p = pedal_map(&s, &PedalState([1.0, 0.0, 1.0, 0.0]), &robot, &cfg);
        let (cmd, _) = assemble_command(&world, &s, [None, None], &p, &robot, &cfg);
        let hold = world.hold_command();
        for k in 0..16 {
            assert_eq!(cmd.0[k], hold.0[k]);
        }
        assert!(cmd.0[16] > 0.0 && cmd.0[17] > 0.0);
    }

    #[test]
    fn assemble_matches_direct_ik_and_holds_unreachable() {
        let (robot, cfg) = setup();
        let world = SimWorld::new(&cfg, 0.8);
        let s = TeleopState {
            mode: TeleopMode::Operation,
            ..TeleopState::new(world.hold_command())
        };
        let target = Pose6D::from_translation(0.75, 0.2, 0.8);
        let (cmd, _) = assemble_command(
            &world,
            &s,
            [Some(target), None],
            &PartialCommand::default(),
            &robot,
            &cfg,
        );
        let direct = arm_ik(&target, &robot.left, Some(&world.arm(Side::Left))).unwrap();
        let mut got = cmd.arm(Side::Left);
        got.gripper = direct.gripper;
        assert_eq!(got, direct);
        assert_eq!(cmd.arm(Side::Right), world.arm(Side::Right));
        let far = Pose6D::from_translation(2.0, 0.2, 0.8);
        let (cmd, notes) = assemble_command(&world, &s, [Some(far), None], &PartialCommand::default(), &robot, &cfg);
        assert_eq!(cmd.arm(Side::Left), world.arm(Side::Left));
        assert_eq!(notes.len(), 1);
    }

    #[test]
    fn world_rate_limit() {
        let (robot, cfg) = setup();
        let w = SimWorld::new(&cfg, 0.5);
        let same = world_step(&w, &w.hold_command(), 0.1, &robot, &cfg.velocity);
        assert_eq!(same.left, w.left);
        assert!((same.time - 0.1).abs() < 1e-15);
        let mut cmd = w.hold_command();
        cmd.0[slot::LEFT_SHOULDER] += 1.0;
        let next = world_step(&w, &cmd, 0.1, &robot, &cfg.velocity);
        assert!((next.left.shoulder - w.left.shoulder - cfg.velocity.arm * 0.1).abs() < 1e-15);
    }
}
