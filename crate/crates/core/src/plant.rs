//! Dual-motor geared joint with backlash and static friction.
//!
//! Two motors drive one load through independent gear meshes. Every quantity
//! is referred to the joint output shaft, so there is no explicit gear ratio:
//! motor angles, the load angle and all torques live in the same frame.
//!
//! Each mesh is a dead-zone spring-damper. Each body (both motor shafts and
//! the load) carries Coulomb + viscous friction with a sticking branch.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

/// Velocities with magnitude at or below this are treated as zero by the
/// friction law.
pub const VELOCITY_DEADBAND: f64 = 1e-6;

/// Largest internal integration step accepted by [`plant_step`].
pub const MAX_STEP: f64 = 2e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("integration produced a non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("integration step {0} s outside (0, {MAX_STEP}]")]
    InvalidStep(f64),
    #[error("invalid plant parameter: {0}")]
    InvalidParams(String),
}

/// Coulomb + viscous friction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    /// Static / Coulomb friction torque (N·m).
    pub tau_s: f64,
    /// Viscous coefficient (N·m·s/rad).
    pub tau_v: f64,
}

/// Dead-zone spring-damper realization of gear play.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacklashParams {
    /// Half-width of the dead zone (rad).
    pub half_width: f64,
    /// Torsional stiffness while a flank is engaged (N·m/rad).
    pub contact_stiffness: f64,
    /// Damping while a flank is engaged (N·m·s/rad).
    pub contact_damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotorParams {
    /// Output-shaft torque per volt of command (N·m/V).
    pub torque_constant: f64,
    /// Output-referred rotor + gear-train inertia of each motor (kg·m²).
    pub inertia_motor: f64,
    /// Load inertia (kg·m²).
    pub inertia_load: f64,
    /// Commands are clamped to ±this (V).
    pub voltage_limit: f64,
    /// Friction at each motor shaft (gear train plus back-EMF-like drag).
    pub friction: FrictionParams,
}

/// Everything [`plant_step`] needs besides the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    pub motor: MotorParams,
    pub backlash: BacklashParams,
    /// Friction at the load bearing.
    pub load_friction: FrictionParams,
}

impl Default for PlantParams {
    /// Calibrated desk-scale joint.
    ///
    /// Breakaway of the whole train (both motors and the load moving
    /// together) needs about 0.75 V of common-mode command. With the default
    /// controller gains a one-LSB position error produces well under that.
    /// The half-width of the gear play is 0.5°.
    fn default() -> Self {
        Self {
            motor: MotorParams {
                torque_constant: 0.3,
                inertia_motor: 2.0e-3,
                inertia_load: 2.0e-2,
                voltage_limit: 12.0,
                friction: FrictionParams {
                    tau_s: 0.15,
                    tau_v: 1.5,
                },
            },
            backlash: BacklashParams {
                half_width: 0.5_f64.to_radians(),
                contact_stiffness: 200.0,
                contact_damping: 0.5,
            },
            load_friction: FrictionParams {
                tau_s: 0.15,
                tau_v: 0.05,
            },
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let m = &self.motor;
        let b = &self.backlash;
        let l = &self.load_friction;
        let checks: [(bool, &str); 11] = [
            (m.torque_constant > 0.0, "torque_constant must be > 0"),
            (m.inertia_motor > 0.0, "inertia_motor must be > 0"),
            (m.inertia_load > 0.0, "inertia_load must be > 0"),
            (m.voltage_limit > 0.0, "voltage_limit must be > 0"),
            (m.friction.tau_s > 0.0, "tau_s must be > 0"),
            (m.friction.tau_v >= 0.0, "tau_v must be >= 0"),
            (l.tau_s > 0.0, "load tau_s must be > 0"),
            (l.tau_v >= 0.0, "load tau_v must be >= 0"),
            (b.half_width >= 0.0, "half_width must be >= 0"),
            (b.contact_stiffness > 0.0, "contact_stiffness must be > 0"),
            (b.contact_damping >= 0.0, "contact_damping must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(PlantError::InvalidParams(msg.to_string()));
            }
        }
        Ok(())
    }
}

/// Continuous state of the joint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub theta_m1: f64,
    pub theta_m2: f64,
    pub omega_m1: f64,
    pub omega_m2: f64,
    pub theta_l: f64,
    pub omega_l: f64,
    pub t: f64,
}

impl PlantState {
    pub fn at_rest(angle: f64) -> Self {
        Self {
            theta_m1: angle,
            theta_m2: angle,
            theta_l: angle,
            ..Self::default()
        }
    }

    fn is_finite(&self) -> bool {
        [
            self.theta_m1,
            self.theta_m2,
            self.omega_m1,
            self.omega_m2,
            self.theta_l,
            self.omega_l,
            self.t,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub counts_per_rev: u32,
}

impl EncoderSpec {
    /// Joint position encoder, 4096 counts per revolution.
    pub const JOINT: Self = Self { counts_per_rev: 4096 };

    /// One count, in radians.
    pub fn lsb(&self) -> f64 {
        TAU / f64::from(self.counts_per_rev.max(1))
    }

    pub fn counts_to_rad(&self, counts: i64) -> f64 {
        counts as f64 * self.lsb()
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::JOINT
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Coulomb + viscous friction with a sticking branch.
///
/// `tau_e` is the sum of all non-friction torques acting on the body. The
/// returned torque opposes motion and is subtracted from `tau_e` by the
/// caller, so a stuck body sees zero net torque.
pub fn friction_torque(omega: f64, tau_e: f64, p: &FrictionParams) -> f64 {
    if omega.abs() > VELOCITY_DEADBAND {
        p.tau_s * sgn(omega) + p.tau_v * omega
    } else if tau_e.abs() < p.tau_s {
        tau_e
    } else {
        p.tau_s * sgn(tau_e)
    }
}

/// Torque transmitted through one gear mesh.
///
/// `delta_angle` is motor angle minus load angle; a positive result pushes
/// the load forward (and the motor backward).
pub fn backlash_torque(delta_angle: f64, delta_rate: f64, p: &BacklashParams) -> f64 {
    let d = p.half_width;
    if delta_angle > d {
        p.contact_stiffness * (delta_angle - d) + p.contact_damping * delta_rate
    } else if delta_angle < -d {
        p.contact_stiffness * (delta_angle + d) + p.contact_damping * delta_rate
    } else {
        0.0
    }
}

/// One semi-implicit Euler step of one body. Returns the new velocity.
fn advance_velocity(omega: f64, tau_ext: f64, inertia: f64, fp: &FrictionParams, dt: f64) -> f64 {
    let stuck = omega.abs() <= VELOCITY_DEADBAND;
    if stuck && tau_ext.abs() < fp.tau_s {
        return 0.0;
    }
    let f = friction_torque(omega, tau_ext, fp);
    let next = omega + dt * (tau_ext - f) / inertia;
    // Friction cannot reverse motion: a sign change while sliding means the
    // body came to rest inside this step.
    if !stuck && next * omega < 0.0 {
        0.0
    } else {
        next
    }
}

/// Advance the joint by `dt` seconds under motor commands `u1`, `u2` (V).
pub fn plant_step(s: &PlantState, u1: f64, u2: f64, dt: f64, params: &PlantParams) -> Result<PlantState, PlantError> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(PlantError::InvalidStep(dt));
    }
    let m = &params.motor;
    let lim = m.voltage_limit;
    let u1 = u1.clamp(-lim, lim);
    let u2 = u2.clamp(-lim, lim);

    let c1 = backlash_torque(s.theta_m1 - s.theta_l, s.omega_m1 - s.omega_l, &params.backlash);
    let c2 = backlash_torque(s.theta_m2 - s.theta_l, s.omega_m2 - s.omega_l, &params.backlash);

    let omega_m1 = advance_velocity(
        s.omega_m1,
        m.torque_constant * u1 - c1,
        m.inertia_motor,
        &m.friction,
        dt,
    );
    let omega_m2 = advance_velocity(
        s.omega_m2,
        m.torque_constant * u2 - c2,
        m.inertia_motor,
        &m.friction,
        dt,
    );
    let omega_l = advance_velocity(s.omega_l, c1 + c2, m.inertia_load, &params.load_friction, dt);

    let next = PlantState {
        theta_m1: s.theta_m1 + omega_m1 * dt,
        theta_m2: s.theta_m2 + omega_m2 * dt,
        omega_m1,
        omega_m2,
        theta_l: s.theta_l + omega_l * dt,
        omega_l,
        t: s.t + dt,
    };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(PlantError::NonFiniteState { t: s.t })
    }
}

/// Quantized load angle, `floor(theta_l / lsb)`.
pub fn encoder_read(s: &PlantState, e: &EncoderSpec) -> i64 {
    quantize(s.theta_l, e.counts_per_rev)
}

/// Floor quantization of an angle to a `counts_per_rev` encoder.
pub fn quantize(angle: f64, counts_per_rev: u32) -> i64 {
    let lsb = TAU / f64::from(counts_per_rev.max(1));
    (angle / lsb).floor() as i64
}
