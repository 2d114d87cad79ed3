//! Experiment drivers shared by the binary and the acceptance suite. Each
//! returns plain data; formatting and exit codes live in [`crate::run`].

use deskpilot_core::config::Config;
use deskpilot_core::control::{
    dwell_metrics, run_tracking_experiment, ControllerConfig, DwellMetrics, TrackingRecord, TrajectorySpec,
};
use deskpilot_core::kinematics::{
    arm_fk, arm_ik, ArmConfig, ArmJoints, KinematicsError, RobotCommand18, RobotConfig, Side,
};
use deskpilot_core::marker::{rotating_platform_bench, ErrorStats, MarkerError, Shape};
use deskpilot_core::plant::{EncoderSpec, PlantError};
use deskpilot_core::pose::{rotation_angle, Pose6D};
use deskpilot_core::session::{reach_script, Script, SessionLog};
use deskpilot_core::teleop::{SimWorld, TeleopConfig};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- tracking

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wave {
    Square,
    Stair,
    Hold,
}

/// Target shape and length of one tracking run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSetup {
    pub wave: Wave,
    /// Square-wave amplitude, staircase step or hold value (rad).
    pub size: f64,
    /// Square-wave period or staircase dwell (s).
    pub period: f64,
    pub n_steps: u32,
    pub duration: f64,
}

impl TrackSetup {
    /// ±3° square wave with a 4 s period, three periods long.
    pub fn square() -> Self {
        Self {
            wave: Wave::Square,
            size: 3f64.to_radians(),
            period: 4.0,
            n_steps: 0,
            duration: 12.0,
        }
    }

    /// Ten 0.175° steps, 1 s each, plus a final dwell on the last step.
    pub fn stair() -> Self {
        Self {
            wave: Wave::Stair,
            size: 0.175f64.to_radians(),
            period: 1.0,
            n_steps: 10,
            duration: 11.0,
        }
    }

    pub fn spec(&self) -> TrajectorySpec {
        match self.wave {
            Wave::Square => TrajectorySpec::Square {
                amplitude: self.size,
                period: self.period,
            },
            Wave::Stair => TrajectorySpec::Staircase {
                step_size: self.size,
                step_dwell: self.period,
                n_steps: self.n_steps,
            },
            Wave::Hold => TrajectorySpec::Hold { value: self.size },
        }
    }
}

/// Controller preset used when a wave does not name one: the high-gain loop
/// for the square wave, the configured loop otherwise.
pub fn preset_for(wave: Wave, configured: &ControllerConfig) -> ControllerConfig {
    match wave {
        Wave::Square => {
            let hg = ControllerConfig::high_gain();
            let mut c = *configured;
            c.gains.kp = hg.gains.kp;
            c.dither_enabled = hg.dither_enabled;
            c
        }
        Wave::Stair | Wave::Hold => *configured,
    }
}

#[derive(Debug, Clone)]
pub struct TrackReport {
    pub record: TrackingRecord,
    pub dwells: Vec<DwellMetrics>,
    pub lsb: f64,
    /// Backlash half-width of the plant that was run (rad).
    pub backlash: f64,
}

impl TrackReport {
    pub fn max_peak_to_peak(&self) -> f64 {
        self.dwells.iter().map(|d| d.peak_to_peak).fold(0.0, f64::max)
    }

    pub fn min_peak_to_peak(&self) -> f64 {
        self.dwells.iter().map(|d| d.peak_to_peak).fold(f64::INFINITY, f64::min)
    }

    pub fn max_terminal_error(&self) -> f64 {
        self.dwells.iter().map(|d| d.terminal_error).fold(0.0, f64::max)
    }

    pub fn mean_terminal_error(&self) -> f64 {
        self.dwells.iter().map(|d| d.terminal_error).sum::<f64>() / self.dwells.len().max(1) as f64
    }

    /// Every dwell keeps swinging by at least the backlash width.
    pub fn oscillating(&self) -> bool {
        !self.dwells.is_empty() && self.min_peak_to_peak() >= self.backlash
    }

    /// The tracking thresholds for this wave: square waves must settle to
    /// 2 LSB peak-to-peak, steps and holds to 1 LSB terminal error.
    pub fn passed(&self, wave: Wave) -> bool {
        match wave {
            Wave::Square => self.max_peak_to_peak() <= 2.0 * self.lsb,
            Wave::Stair | Wave::Hold => self.max_terminal_error() <= self.lsb,
        }
    }
}

pub fn track(cfg: &Config, ctl: &ControllerConfig, setup: &TrackSetup) -> Result<TrackReport, PlantError> {
    let spec = setup.spec();
    let record = run_tracking_experiment(&cfg.plant, ctl, &spec, setup.duration)?;
    let dwells = dwell_metrics(&record, &spec, setup.duration);
    Ok(TrackReport {
        record,
        dwells,
        lsb: EncoderSpec::JOINT.lsb(),
        backlash: cfg.plant.backlash.half_width,
    })
}

// ------------------------------------------------------------ marker bench

/// Bench one shape at pixel noise `sigma`, other settings from `cfg`.
pub fn bench(cfg: &Config, shape: Shape, sigma: f64, threads: usize) -> Result<ErrorStats, MarkerError> {
    let mut b = cfg.bench;
    b.noise_px = sigma;
    rotating_platform_bench(shape, &cfg.camera, &b, threads)
}

/// Band the cube's mean rotation error must land in (deg).
pub const CUBE_ERROR_BAND: [f64; 2] = [4.0, 7.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub cube: ErrorStats,
    pub evaluations: u32,
}

/// Find a noise level that puts the cube's mean rotation error inside
/// [`CUBE_ERROR_BAND`], by bracketing then bisecting. Error grows with
/// noise, so the search is one-dimensional.
pub fn calibrate_sigma(cfg: &Config, threads: usize) -> Result<Calibration, MarkerError> {
    let [lo_band, hi_band] = CUBE_ERROR_BAND;
    let mid = 0.5 * (lo_band + hi_band);
    let mut evaluations = 0;
    let mut eval = |s: f64| {
        evaluations += 1;
        bench(cfg, Shape::Cube6, s, threads)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut at_hi = eval(hi)?;
    while at_hi.mean_rot_deg < lo_band {
        lo = hi;
        hi *= 2.0;
        if hi > 256.0 {
            return Err(MarkerError::InsufficientObservations(
                "cube error never reaches the band".into(),
            ));
        }
        at_hi = eval(hi)?;
    }
    if at_hi.mean_rot_deg <= hi_band {
        return Ok(Calibration {
            sigma: hi,
            cube: at_hi,
            evaluations,
        });
    }
    for _ in 0..40 {
        let s = 0.5 * (lo + hi);
        let st = eval(s)?;
        if (lo_band..=hi_band).contains(&st.mean_rot_deg) {
            return Ok(Calibration {
                sigma: s,
                cube: st,
                evaluations,
            });
        }
        if st.mean_rot_deg < mid {
            lo = s;
        } else {
            hi = s;
        }
    }
    Err(MarkerError::InsufficientObservations(
        "bisection did not land in the band".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub sigma: f64,
    pub cube: ErrorStats,
    pub poly: ErrorStats,
}

impl Comparison {
    pub fn rot_ratio(&self) -> f64 {
        self.poly.mean_rot_deg / self.cube.mean_rot_deg
    }

    pub fn trans_ratio(&self) -> f64 {
        self.poly.mean_trans_mm / self.cube.mean_trans_mm
    }

    /// Both ratios at most one half and no flagged poly26 solve.
    pub fn passed(&self) -> bool {
        self.rot_ratio() <= 0.5 && self.trans_ratio() <= 0.5 && self.poly.ambiguity_rate == 0.0
    }
}

pub fn compare(cfg: &Config, sigma: f64, threads: usize) -> Result<Comparison, MarkerError> {
    Ok(Comparison {
        sigma,
        cube: bench(cfg, Shape::Cube6, sigma, threads)?,
        poly: bench(cfg, Shape::Poly26, sigma, threads)?,
    })
}

// --------------------------------------------------------------- IK audit

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IkAudit {
    pub samples: u32,
    pub max_pos_err: f64,
    pub max_rot_err: f64,
    /// IK without a previous solution returned the other, equally valid
    /// branch from the one sampled.
    pub alternate_branch: u32,
    /// IK seeded with the sampled joints returned a different branch.
    pub branch_flips: u32,
    pub failures: u32,
    pub unreachable_samples: u32,
    pub unreachable_rejected: u32,
    pub boundary_solvable: bool,
    pub beyond_boundary_rejected: bool,
}

pub const IK_POS_TOL: f64 = 1e-9;
pub const IK_ROT_TOL: f64 = 1e-7;

impl IkAudit {
    pub fn passed(&self) -> bool {
        self.failures == 0
            && self.max_pos_err <= IK_POS_TOL
            && self.max_rot_err <= IK_ROT_TOL
            && self.branch_flips == 0
            && self.unreachable_rejected == self.unreachable_samples
            && self.boundary_solvable
            && self.beyond_boundary_rejected
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    rng.random_range(r[0]..=r[1])
}

fn random_joints(rng: &mut ChaCha8Rng, cfg: &ArmConfig) -> ArmJoints {
    let l = &cfg.joint_limits;
    ArmJoints {
        lift: uniform(rng, cfg.lift_range),
        shoulder: uniform(rng, l.shoulder),
        elbow: uniform(rng, l.elbow),
        wrist1: uniform(rng, l.wrist1),
        wrist2: uniform(rng, l.wrist2),
        wrist3: uniform(rng, l.wrist3),
        gripper: 0.0,
    }
}

fn revolute_gap(a: &ArmJoints, b: &ArmJoints) -> f64 {
    use deskpilot_core::kinematics::wrap_angle;
    [
        a.shoulder - b.shoulder,
        a.elbow - b.elbow,
        a.wrist1 - b.wrist1,
        a.wrist2 - b.wrist2,
        a.wrist3 - b.wrist3,
    ]
    .iter()
    .map(|d| wrap_angle(*d).abs())
    .fold(0.0, f64::max)
}

/// Away from the elbow and wrist singularities, where the branches are
/// distinct and the previous solution must be kept.
fn regular(j: &ArmJoints) -> bool {
    use std::f64::consts::PI;
    j.elbow.abs() > 1e-3 && (PI - j.elbow.abs()) > 1e-3 && j.wrist2.abs() > 1e-3 && (PI - j.wrist2.abs()) > 1e-3
}

/// Target at planar distance `reach` from the shoulder axis, mid-lift.
pub fn reach_target(cfg: &ArmConfig, reach: f64, bearing: f64) -> Pose6D {
    let z = 0.5 * (cfg.lift_range[0] + cfg.lift_range[1]);
    Pose6D::new(
        UnitQuaternion::identity(),
        Vector3::new(reach * bearing.cos(), cfg.shoulder_offset + reach * bearing.sin(), z),
    )
}

/// FK of random joint samples, solved back and compared, plus a set of
/// out-of-reach targets that must all be refused.
pub fn ik_audit(robot: &RobotConfig, side: Side, samples: u32, seed: u64) -> IkAudit {
    let cfg = robot.arm(side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = IkAudit {
        samples,
        ..Default::default()
    };
    for _ in 0..samples {
        let j = random_joints(&mut rng, cfg);
        let Ok(target) = arm_fk(&j, cfg) else {
            a.failures += 1;
            continue;
        };
        match arm_ik(&target, cfg, None).and_then(|s| Ok((s, arm_fk(&s, cfg)?))) {
            Ok((sol, back)) => {
                a.max_pos_err = a.max_pos_err.max((back.translation - target.translation).norm());
                a.max_rot_err = a.max_rot_err.max(rotation_angle(&back.rotation, &target.rotation));
                a.alternate_branch += u32::from(revolute_gap(&sol, &j) > 1e-6);
            }
            Err(_) => a.failures += 1,
        }
        match arm_ik(&target, cfg, Some(&j)) {
            Ok(sol) => a.branch_flips += u32::from(regular(&j) && revolute_gap(&sol, &j) > 1e-6),
            Err(_) => a.failures += 1,
        }
    }
    let far = cfg.max_reach();
    a.unreachable_samples = (samples / 10).max(1);
    for _ in 0..a.unreachable_samples {
        let reach = rng.random_range(far + 1e-3..far + 0.5);
        let t = reach_target(
            cfg,
            reach,
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        a.unreachable_rejected += u32::from(matches!(arm_ik(&t, cfg, None), Err(KinematicsError::Unreachable(_))));
    }
    a.boundary_solvable = arm_ik(&reach_target(cfg, 0.750, 0.3), cfg, None).is_ok();
    a.beyond_boundary_rejected = matches!(
        arm_ik(&reach_target(cfg, 0.751, 0.3), cfg, None),
        Err(KinematicsError::Unreachable(_))
    );
    a
}

// --------------------------------------------------------------- teleop

/// Left-arm goal used by the built-in reach task, relative to the start.
pub const REACH_OFFSET: [f64; 3] = [0.1, -0.08, 0.05];

/// The built-in reach-to-point task: operation mode, clutch, a 3 s handle
/// move toward a goal 14 cm away, 2 s to settle. With `inject`, one
/// mirrored ambiguity-flagged estimate replaces the real one mid-move.
pub fn reach_task(teleop: &TeleopConfig, robot: &RobotConfig, initial_lift: f64, inject: bool) -> Script {
    let world = SimWorld::new(teleop, initial_lift);
    let ee = world.ee_pose(Side::Left, robot).expect("home pose is reachable");
    let goal = [
        ee.translation.x + REACH_OFFSET[0],
        ee.translation.y + REACH_OFFSET[1],
        ee.translation.z + REACH_OFFSET[2],
    ];
    let handle = Pose6D::new(
        UnitQuaternion::from_euler_angles(0.2, 0.4, 0.1),
        Vector3::new(0.0, 0.0, 0.45),
    );
    reach_script(&ee, goal, &handle, teleop, 3.0, 5.0, inject.then_some(2.0))
}

/// Largest single-tick change of the commanded end-effector position in a
/// recorded session (m).
pub fn max_ee_jump(log: &SessionLog, side: Side) -> f64 {
    let arm = log.header.robot.arm(side);
    let ee: Vec<Vector3<f64>> = log
        .records
        .iter()
        .filter_map(|r| arm_fk(&r.cmd.arm(side), arm).ok())
        .map(|p| p.translation)
        .collect();
    ee.windows(2).map(|w| (w[1] - w[0]).norm()).fold(0.0, f64::max)
}

/// Per-tick bound on end-effector command motion implied by the speed gate.
pub fn ee_jump_bound(teleop: &TeleopConfig) -> f64 {
    teleop.handle_speed * teleop.translation_scale * teleop.tick()
}

/// Distance from the left end effector described by a state vector to a
/// body-frame goal (m); infinite if the state is outside joint limits.
pub fn state_goal_distance(state: &RobotCommand18, robot: &RobotConfig, goal: [f64; 3]) -> f64 {
    arm_fk(&state.arm(Side::Left), robot.arm(Side::Left)).map_or(f64::INFINITY, |p| {
        (p.translation - Vector3::new(goal[0], goal[1], goal[2])).norm()
    })
}
