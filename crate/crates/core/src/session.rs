//! Demonstration recording, scripted operator input and deterministic replay.

use crate::kinematics::{slot, RobotCommand18, RobotConfig, Side};
use crate::marker::{
    build_polyhedron, solve_pose, synth_observe, CameraIntrinsics, MarkerError, MarkerGeometry, PoseEstimate, Shape,
};
use crate::pose::Pose6D;
use crate::teleop::{PedalState, Pilot, SimWorld, TeleopConfig, TeleopMode, TickInput, TickOutput};
use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("corrupt session log: {0}")]
    CorruptLog(String),
    #[error("record time {t} does not follow {prev}")]
    NonMonotonic { t: f64, prev: f64 },
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error(transparent)]
    Marker(#[from] MarkerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const SESSION_FORMAT: &str = "deskpilot-session";
pub const SESSION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionHeader {
    pub format: String,
    pub version: u32,
    pub tick_hz: f64,
    pub layout: Vec<String>,
    pub initial: SimWorld,
    pub robot: RobotConfig,
    pub teleop: TeleopConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub t: f64,
    pub state: RobotCommand18,
    pub cmd: RobotCommand18,
    pub mode: TeleopMode,
    pub pedals: PedalState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: SessionHeader,
    pub records: Vec<SessionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    checksum: String,
}

impl SessionLog {
    pub fn new(initial: SimWorld, robot: RobotConfig, teleop: TeleopConfig) -> Self {
        Self {
            header: SessionHeader {
                format: SESSION_FORMAT.into(),
                version: SESSION_VERSION,
                tick_hz: teleop.tick_hz,
                layout: slot::NAMES.iter().map(|s| s.to_string()).collect(),
                initial,
                robot,
                teleop,
            },
            records: Vec::new(),
        }
    }

    /// Append one tick. Times must strictly increase.
    pub fn record_step(&mut self, rec: SessionRecord) -> Result<(), SessionError> {
        if let Some(prev) = self.records.last() {
            if !(rec.t > prev.t) {
                return Err(SessionError::NonMonotonic { t: rec.t, prev: prev.t });
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Header line, one line per record, then a trailer carrying the
    /// SHA-256 of everything before it.
    pub fn to_text(&self) -> String {
        let mut body = serde_json::to_string(&self.header).expect("header serializes");
        body.push('\n');
        for r in &self.records {
            body.push_str(&serde_json::to_string(r).expect("record serializes"));
            body.push('\n');
        }
        let trailer = Trailer {
            checksum: hex::encode(Sha256::digest(body.as_bytes())),
        };
        body.push_str(&serde_json::to_string(&trailer).expect("trailer serializes"));
        body.push('\n');
        body
    }

    pub fn from_text(text: &str) -> Result<Self, SessionError> {
        let corrupt = |m: String| SessionError::CorruptLog(m);
        let trimmed = text
            .strip_suffix('\n')
            .ok_or_else(|| corrupt("missing final newline".into()))?;
        let split = trimmed.rfind('\n').ok_or_else(|| corrupt("missing trailer".into()))?;
        let (body, trailer) = (&text[..=split], &trimmed[split + 1..]);
        let trailer: Trailer = serde_json::from_str(trailer).map_err(|e| corrupt(format!("trailer: {e}")))?;
        if hex::encode(Sha256::digest(body.as_bytes())) != trailer.checksum {
            return Err(corrupt("checksum mismatch".into()));
        }
        let mut lines = body.lines();
        let header: SessionHeader = serde_json::from_str(lines.next().ok_or_else(|| corrupt("missing header".into()))?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format != SESSION_FORMAT || header.version != SESSION_VERSION {
            return Err(corrupt(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut log = SessionLog {
            header,
            records: Vec::new(),
        };
        for (k, line) in lines.enumerate() {
            let rec: SessionRecord = serde_json::from_str(line).map_err(|e| corrupt(format!("record {k}: {e}")))?;
            log.record_step(rec).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(log)
    }
}

pub fn save_session(log: &SessionLog, path: &Path) -> Result<(), SessionError> {
    fs::write(path, log.to_text())?;
    Ok(())
}

pub fn load_session(path: &Path) -> Result<SessionLog, SessionError> {
    SessionLog::from_text(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub records: usize,
    /// Largest slot difference between recorded and re-simulated state.
    pub max_divergence: f64,
    pub final_world: SimWorld,
}

/// Re-execute the recorded commands from the recorded initial world.
pub fn replay(log: &SessionLog) -> ReplayReport {
    let h = &log.header;
    let dt = 1.0 / h.tick_hz;
    let mut world = h.initial;
    let mut max_divergence: f64 = 0.0;
    for r in &log.records {
        let s = world.state_vector();
        for (a, b) in s.0.iter().zip(&r.state.0) {
            let d = if a == b { 0.0 } else { (a - b).abs() };
            max_divergence = max_divergence.max(if d.is_nan() { f64::INFINITY } else { d });
        }
        world = crate::teleop::world_step(&world, &r.cmd, dt, &h.robot, &h.teleop.velocity);
    }
    ReplayReport {
        records: log.records.len(),
        max_divergence,
        final_world: world,
    }
}

/// Headless stand-in for the operator's camera and handle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub shape: Shape,
    pub circumradius: f64,
    pub tag_fill: f64,
    pub noise_px: f64,
    pub min_view_angle_deg: f64,
    pub camera: CameraIntrinsics,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            shape: Shape::Poly26,
            circumradius: 0.05,
            tag_fill: 0.8,
            noise_px: 0.5,
            min_view_angle_deg: 15.0,
            camera: CameraIntrinsics::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HandleTracker {
    pub cfg: TrackerConfig,
    geom: MarkerGeometry,
    prior: [Option<Pose6D>; 2],
}

impl HandleTracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self, MarkerError> {
        cfg.camera.validate()?;
        Ok(Self {
            geom: build_polyhedron(cfg.shape, cfg.circumradius, cfg.tag_fill)?,
            cfg,
            prior: [None, None],
        })
    }

    /// Observe and solve one handle. Failures yield no estimate.
    pub fn estimate(&mut self, side: Side, truth: &Pose6D, t: f64, seed: u64) -> Option<PoseEstimate> {
        let i = usize::from(side == Side::Right);
        let c = &self.cfg;
        let est = synth_observe(&self.geom, truth, &c.camera, c.noise_px, c.min_view_angle_deg, seed)
            .and_then(|mut obs| {
                obs.timestamp = t;
                solve_pose(&obs, &self.geom, &c.camera, self.prior[i].as_ref())
            })
            .ok();
        self.prior[i] = est.map(|e| e.pose);
        est
    }
}

/// One scripted instant. Handle poses are keyframes (camera frame),
/// linearly interpolated; pedals hold until changed; keys and injections
/// fire once on the first tick at or after `t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptEvent {
    pub t: f64,
    pub keys: Vec<String>,
    pub pedals: Option<[f64; 4]>,
    pub left: Option<Pose6D>,
    pub right: Option<Pose6D>,
    /// Replace this tick's estimate with a mirrored, ambiguity-flagged one.
    pub inject_ambiguous: Vec<Side>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub duration: f64,
    #[serde(default)]
    pub tracker: TrackerConfig,
    pub events: Vec<ScriptEvent>,
    /// Body-frame goal for the left end effector, checked at the end.
    #[serde(default)]
    pub goal_left: Option<[f64; 3]>,
}

impl Script {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !(self.duration > 0.0) {
            return Err(SessionError::InvalidScript("duration must be > 0".into()));
        }
        if self.events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(SessionError::InvalidScript("events must be ordered by t".into()));
        }
        Ok(())
    }
}

fn lerp_pose(a: &Pose6D, b: &Pose6D, s: f64) -> Pose6D {
    Pose6D::new(a.rotation.slerp(&b.rotation, s), a.translation.lerp(&b.translation, s))
}

fn keyframe_at(events: &[ScriptEvent], side: Side, t: f64) -> Option<Pose6D> {
    let frames: Vec<(f64, Pose6D)> = events
        .iter()
        .filter_map(|e| match side {
            Side::Left => e.left.map(|p| (e.t, p)),
            Side::Right => e.right.map(|p| (e.t, p)),
        })
        .collect();
    let first = frames.first()?;
    if t < first.0 {
        return None;
    }
    match frames.windows(2).find(|w| t >= w[0].0 && t < w[1].0) {
        Some(w) => Some(lerp_pose(&w[0].1, &w[1].1, (t - w[0].0) / (w[1].0 - w[0].0))),
        None => frames.last().map(|f| f.1),
    }
}

/// Turns a [`Script`] into per-tick operator input.
#[derive(Debug, Clone)]
pub struct ScriptPlayer {
    pub script: Script,
    tracker: HandleTracker,
    seed: u64,
    tick: f64,
    next_event: usize,
    pedals: PedalState,
}

impl ScriptPlayer {
    pub fn new(script: Script, tick_hz: f64, seed: u64) -> Result<Self, SessionError> {
        script.validate()?;
        Ok(Self {
            tracker: HandleTracker::new(script.tracker)?,
            script,
            seed,
            tick: 1.0 / tick_hz,
            next_event: 0,
            pedals: PedalState::default(),
        })
    }

    pub fn n_ticks(&self) -> u64 {
        (self.script.duration / self.tick).round() as u64
    }

    /// True handle pose at time `t`, if scripted.
    pub fn handle_pose(&self, side: Side, t: f64) -> Option<Pose6D> {
        keyframe_at(&self.script.events, side, t)
    }

    /// Input for tick `k`; ticks must be requested in order.
    pub fn input(&mut self, k: u64) -> TickInput {
        let t = k as f64 * self.tick;
        let mut input = TickInput::default();
        let mut inject = Vec::new();
        while let Some(e) = self.script.events.get(self.next_event) {
            if e.t > t + 1e-9 {
                break;
            }
            input.keys.extend(e.keys.iter().cloned());
            if let Some(p) = e.pedals {
                self.pedals = PedalState(p);
            }
            inject.extend(e.inject_ambiguous.iter().copied());
            self.next_event += 1;
        }
        input.pedals = self.pedals;
        for (i, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            let Some(truth) = self.handle_pose(side, t) else {
                continue;
            };
            let seed = self.seed.wrapping_add(2 * k + i as u64);
            input.estimates[i] = if inject.contains(&side) {
                Some(mirrored_estimate(&truth, t))
            } else {
                self.tracker.estimate(side, &truth, t, seed)
            };
        }
        input
    }
}

/// A wrong-branch solve like the ones the planar ambiguity produces: the
/// handle tilted 40° about the camera x axis and pushed 5 cm, flagged.
pub fn mirrored_estimate(truth: &Pose6D, t: f64) -> PoseEstimate {
    let tilt = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 40f64.to_radians());
    PoseEstimate {
        pose: Pose6D::new(tilt * truth.rotation, truth.translation + Vector3::new(0.0, 0.05, 0.0)),
        rms_reprojection: 0.5,
        n_tags_used: 1,
        ambiguity_flag: true,
        converged: true,
        timestamp: t,
    }
}

/// Result of running a script headlessly.
#[derive(Debug, Clone)]
pub struct ScriptRun {
    pub log: SessionLog,
    pub outputs: Vec<TickOutput>,
    pub pilot: Pilot,
}

pub fn record_of(t: f64, out: &TickOutput, mode: TeleopMode, pedals: PedalState) -> SessionRecord {
    SessionRecord {
        t,
        state: out.state,
        cmd: out.command,
        mode,
        pedals,
    }
}

/// Drive a local [`Pilot`] through the script and record every tick.
pub fn run_script(
    script: &Script,
    robot: RobotConfig,
    cfg: TeleopConfig,
    initial_lift: f64,
    seed: u64,
) -> Result<ScriptRun, SessionError> {
    let mut player = ScriptPlayer::new(script.clone(), cfg.tick_hz, seed)?;
    let mut pilot = Pilot::new(robot, cfg.clone(), initial_lift);
    let mut log = SessionLog::new(pilot.world, robot, cfg);
    let mut outputs = Vec::new();
    for k in 0..player.n_ticks() {
        let input = player.input(k);
        let t = pilot.world.time;
        let out = pilot.tick(&input);
        log.record_step(record_of(t, &out, pilot.state.mode, input.pedals.sanitized()))?;
        outputs.push(out);
    }
    Ok(ScriptRun { log, outputs, pilot })
}

/// Build a reach script: switch to operation mode, engage the left clutch
/// with the handle at `handle_start`, then move the handle over
/// `move_time` so the end effector travels from `ee_start` to `goal`
/// (body frame), and hold until `duration`. Optionally inject one flagged
/// estimate mid-move.
pub fn reach_script(
    ee_start: &Pose6D,
    goal: [f64; 3],
    handle_start: &Pose6D,
    cfg: &TeleopConfig,
    move_time: f64,
    duration: f64,
    inject_at: Option<f64>,
) -> Script {
    let c = &cfg.camera_to_body;
    let d = Vector3::new(goal[0], goal[1], goal[2]) - ee_start.translation;
    // Body displacement = C · camera displacement · scale, so invert with Cᵀ.
    let cam = Vector3::new(
        c[0][0] * d.x + c[1][0] * d.y + c[2][0] * d.z,
        c[0][1] * d.x + c[1][1] * d.y + c[2][1] * d.z,
        c[0][2] * d.x + c[1][2] * d.y + c[2][2] * d.z,
    ) / cfg.translation_scale;
    let handle_end = Pose6D::new(handle_start.rotation, handle_start.translation + cam);
    let b = &cfg.bindings;
    let mut events = vec![
        ScriptEvent {
            t: 0.0,
            keys: vec![b.toggle_mode.clone()],
            left: Some(*handle_start),
            ..Default::default()
        },
        ScriptEvent {
            t: 0.2,
            keys: vec![b.clutch_left.clone()],
            ..Default::default()
        },
        ScriptEvent {
            t: 0.5,
            left: Some(*handle_start),
            ..Default::default()
        },
        ScriptEvent {
            t: 0.5 + move_time,
            left: Some(handle_end),
            ..Default::default()
        },
    ];
    if let Some(ti) = inject_at {
        events.push(ScriptEvent {
            t: ti,
            inject_ambiguous: vec![Side::Left],
            ..Default::default()
        });
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    Script {
        duration,
        tracker: TrackerConfig::default(),
        events,
        goal_left: Some(goal),
    }
}

/// Distance (m) from the left end effector to the script's goal.
pub fn goal_distance(world: &SimWorld, robot: &RobotConfig, goal: [f64; 3]) -> Option<f64> {
    let ee = world.ee_pose(Side::Left, robot)?;
    Some((ee.translation - Vector3::new(goal[0], goal[1], goal[2])).norm())
}

/// Largest single-tick change of a commanded end-effector position (m).
pub fn max_ee_command_jump(outputs: &[TickOutput], robot: &RobotConfig, side: Side) -> f64 {
    let ee: Vec<Vector3<f64>> = outputs
        .iter()
        .filter_map(|o| crate::kinematics::arm_fk(&o.command.arm(side), robot.arm(side)).ok())
        .map(|p| p.translation)
        .collect();
    ee.windows(2).map(|w| (w[1] - w[0]).norm()).fold(0.0, f64::max)
}
