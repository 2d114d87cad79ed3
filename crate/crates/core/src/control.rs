//! Joint controller: PID, counter-drive bias and stiction dither, plus the
//! closed-loop tracking harness that runs it against the simulated joint.

use crate::plant::{encoder_read, plant_step, EncoderSpec, PlantError, PlantParams, PlantState};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

/// Default controller rate (Hz).
pub const CONTROL_RATE_HZ: f64 = 66.0;

/// Internal plant integration step upper bound used by the harness (s).
pub const PLANT_DT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Integral state clamp (rad·s).
    pub integral_limit: f64,
    /// Output clamp (V).
    pub output_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub gains: PidGains,
    /// Opposing bias applied to the two motors (V).
    pub counter_bias: f64,
    /// Amplitude of the alternating feed-forward (V).
    pub dither_amplitude: f64,
    /// Half-period of the dither square wave (s).
    pub dither_period: f64,
    pub counter_drive_enabled: bool,
    pub dither_enabled: bool,
    pub cycle_time: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let cycle_time = 1.0 / CONTROL_RATE_HZ;
        Self {
            gains: PidGains {
                kp: 110.0,
                ki: 0.0,
                kd: 0.0,
                integral_limit: 0.05,
                output_limit: 12.0,
            },
            counter_bias: 6.0,
            dither_amplitude: 0.8,
            dither_period: cycle_time,
            counter_drive_enabled: true,
            dither_enabled: true,
            cycle_time,
        }
    }
}

impl ControllerConfig {
    /// Stiff position loop used for the square-wave experiments. Stable on
    /// the preloaded joint, limit-cycles when the gear play is exposed.
    pub fn high_gain() -> Self {
        let mut cfg = Self::default();
        cfg.gains.kp = 450.0;
        cfg.dither_enabled = false;
        cfg
    }

    pub fn validate(&self) -> Result<(), String> {
        let g = &self.gains;
        if !(self.cycle_time > 0.0) {
            return Err("cycle_time must be > 0".into());
        }
        if !(self.dither_period > 0.0) {
            return Err("dither_period must be > 0".into());
        }
        if !(self.counter_bias >= 0.0 && self.dither_amplitude >= 0.0) {
            return Err("counter_bias and dither_amplitude must be >= 0".into());
        }
        if !(g.kp >= 0.0 && g.ki >= 0.0 && g.kd >= 0.0) {
            return Err("gains must be >= 0".into());
        }
        if !(g.integral_limit > 0.0 && g.output_limit > 0.0) {
            return Err("integral_limit and output_limit must be > 0".into());
        }
        Ok(())
    }
}

/// PID memory carried between ticks.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_measured: Option<f64>,
}

/// One controller tick. Derivative acts on the measurement; the integrator
/// is frozen while the output is saturated in the direction of the error.
pub fn pid_step(st: &PidState, target: f64, measured: f64, cfg: &ControllerConfig) -> (PidState, f64) {
    let g = &cfg.gains;
    let dt = cfg.cycle_time;
    let e = target - measured;
    let d = match st.prev_measured {
        Some(prev) => -(measured - prev) / dt,
        None => 0.0,
    };
    let lim = g.output_limit;
    let trial = (st.integral + e * dt).clamp(-g.integral_limit, g.integral_limit);
    let raw = g.kp * e + g.ki * trial + g.kd * d;
    let integral = if raw.abs() > lim && raw * e > 0.0 {
        st.integral
    } else {
        trial
    };
    let u = (g.kp * e + g.ki * integral + g.kd * d).clamp(-lim, lim);
    (
        PidState {
            integral,
            prev_measured: Some(measured),
        },
        u,
    )
}

/// Split the controller output between the two motors with opposing bias.
pub fn counter_drive(u_o: f64, u_b: f64) -> (f64, f64) {
    (u_o + u_b, u_o - u_b)
}

/// `amp` during even half-periods `floor(t / period)`, `-amp` during odd ones.
pub fn dither_term(t: f64, period: f64, amp: f64) -> f64 {
    // Tick times are computed as k * period; the nudge keeps exact multiples
    // from rounding down into the previous half-period.
    let k = (t / period + 1e-9).floor() as i64;
    if k.rem_euclid(2) == 0 {
        amp
    } else {
        -amp
    }
}

/// Target trajectories for the tracking experiments (rad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// `+amplitude` for the first half of every period, `-amplitude` after.
    Square {
        amplitude: f64,
        period: f64,
    },
    /// `step_size * min(floor(t / step_dwell), n_steps)`.
    Staircase {
        step_size: f64,
        step_dwell: f64,
        n_steps: u32,
    },
    Hold {
        value: f64,
    },
    /// Piecewise-constant `(t, value)` breakpoints; value before the first
    /// breakpoint is zero.
    Scripted {
        points: Vec<(f64, f64)>,
    },
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::Square { period, .. } if !(*period > 0.0) => Err("square period must be > 0".into()),
            Self::Staircase {
                step_size, step_dwell, ..
            } if !(*step_size > 0.0 && *step_dwell > 0.0) => {
                Err("staircase step_size and step_dwell must be > 0".into())
            }
            Self::Scripted { points } if points.windows(2).any(|w| w[1].0 <= w[0].0) => {
                Err("scripted breakpoints must have increasing t".into())
            }
            _ => Ok(()),
        }
    }

    /// Constant-target intervals `(start, end, target)` covering `[0, duration)`.
    pub fn dwells(&self, duration: f64) -> Vec<(f64, f64, f64)> {
        let mut edges = vec![0.0];
        match self {
            Self::Square { period, .. } => {
                let half = period / 2.0;
                let mut k = 1.0;
                while k * half < duration {
                    edges.push(k * half);
                    k += 1.0;
                }
            }
            Self::Staircase {
                step_dwell, n_steps, ..
            } => {
                for k in 1..=*n_steps {
                    let t = f64::from(k) * step_dwell;
                    if t < duration {
                        edges.push(t);
                    }
                }
            }
            Self::Hold { .. } => {}
            Self::Scripted { points } => {
                edges.extend(points.iter().map(|p| p.0).filter(|&t| t > 0.0 && t < duration));
            }
        }
        edges.push(duration);
        edges.windows(2).map(|w| (w[0], w[1], self.sample(w[0]))).collect()
    }

    pub fn sample(&self, t: f64) -> f64 {
        trajectory_sample(self, t)
    }
}

pub fn trajectory_sample(spec: &TrajectorySpec, t: f64) -> f64 {
    match spec {
        TrajectorySpec::Square { amplitude, period } => {
            let phase = (t / period).fract();
            if phase < 0.5 {
                *amplitude
            } else {
                -amplitude
            }
        }
        TrajectorySpec::Staircase {
            step_size,
            step_dwell,
            n_steps,
        } => {
            let k = (t / step_dwell).floor().max(0.0).min(f64::from(*n_steps));
            step_size * k
        }
        TrajectorySpec::Hold { value } => *value,
        TrajectorySpec::Scripted { points } => points.iter().take_while(|p| p.0 <= t).last().map_or(0.0, |p| p.1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub t: f64,
    pub target: f64,
    pub measured: f64,
    pub u_o: f64,
    pub u1: f64,
    pub u2: f64,
}

/// One row per controller tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub rows: Vec<TrackingRow>,
}

impl TrackingRecord {
    pub const CSV_HEADER: &'static str = "t,target,measured,u_o,u1,u2";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.t, r.target, r.measured, r.u_o, r.u1, r.u2)?;
        }
        Ok(())
    }
}

/// Closed-loop run: every tick reads the encoder, runs the PID (plus
/// dither), splits the output with the counter-drive bias and holds the two
/// motor commands while the plant integrates at no more than [`PLANT_DT`].
pub fn run_tracking_experiment(
    params: &PlantParams,
    cfg: &ControllerConfig,
    spec: &TrajectorySpec,
    duration: f64,
) -> Result<TrackingRecord, PlantError> {
    run_tracking_from(params, cfg, spec, duration, PlantState::default())
}

pub fn run_tracking_from(
    params: &PlantParams,
    cfg: &ControllerConfig,
    spec: &TrajectorySpec,
    duration: f64,
    initial: PlantState,
) -> Result<TrackingRecord, PlantError> {
    let encoder = EncoderSpec::JOINT;
    let ticks = (duration / cfg.cycle_time).floor() as usize;
    let substeps = (cfg.cycle_time / PLANT_DT).ceil().max(1.0) as usize;
    let h = cfg.cycle_time / substeps as f64;
    let lim = params.motor.voltage_limit;

    let mut plant = initial;
    let mut pid = PidState::default();
    let mut rows = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let t = k as f64 * cfg.cycle_time;
        let target = trajectory_sample(spec, t);
        let measured = encoder.counts_to_rad(encoder_read(&plant, &encoder));
        let (next_pid, mut u_o) = pid_step(&pid, target, measured, cfg);
        pid = next_pid;
        if cfg.dither_enabled {
            u_o += dither_term(t, cfg.dither_period, cfg.dither_amplitude);
        }
        let bias = if cfg.counter_drive_enabled {
            cfg.counter_bias
        } else {
            0.0
        };
        let (u1, u2) = counter_drive(u_o, bias);
        let (u1, u2) = (u1.clamp(-lim, lim), u2.clamp(-lim, lim));
        rows.push(TrackingRow {
            t,
            target,
            measured,
            u_o,
            u1,
            u2,
        });
        for _ in 0..substeps {
            plant = plant_step(&plant, u1, u2, h, params)?;
        }
    }
    Ok(TrackingRecord { rows })
}

/// Statistics over the last quarter of one constant-target interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DwellMetrics {
    pub start: f64,
    pub end: f64,
    pub target: f64,
    /// Max minus min of the measured position.
    pub peak_to_peak: f64,
    /// Mean of |target - measured|.
    pub terminal_error: f64,
}

/// Fraction of each dwell, counted from its end, used for settling metrics.
pub const SETTLING_WINDOW: f64 = 0.25;

pub fn dwell_metrics(record: &TrackingRecord, spec: &TrajectorySpec, duration: f64) -> Vec<DwellMetrics> {
    spec.dwells(duration)
        .into_iter()
        .filter_map(|(start, end, target)| {
            let from = end - SETTLING_WINDOW * (end - start);
            let window: Vec<f64> = record
                .rows
                .iter()
                .filter(|r| r.t >= from && r.t < end)
                .map(|r| r.measured)
                .collect();
            if window.is_empty() {
                return None;
            }
            let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = window.iter().copied().fold(f64::INFINITY, f64::min);
            let err = window.iter().map(|m| (target - m).abs()).sum::<f64>() / window.len() as f64;
            Some(DwellMetrics {
                start,
                end,
                target,
                peak_to_peak: max - min,
                terminal_error: err,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with(kp: f64, ki: f64, kd: f64, out: f64) -> ControllerConfig {
        ControllerConfig {
            gains: PidGains {
                kp,
                ki,
                kd,
                integral_limit: 1.0,
                output_limit: out,
            },
            ..ControllerConfig::default()
        }
    }

    #[test]
    fn pid_zero_error_zero_output() {
        let cfg = cfg_with(5.0, 3.0, 1.0, 10.0);
        let mut st = PidState::default();
        for _ in 0..10 {
            let (s, u) = pid_step(&st, 0.2, 0.2, &cfg);
            assert_eq!(u, 0.0);
            st = s;
        }
    }

    #[test]
    fn pid_proportional_only() {
        let cfg = cfg_with(2.0, 0.0, 0.0, 10.0);
        let (_, u) = pid_step(&PidState::default(), 0.1, 0.0, &cfg);
        assert!((u - 0.2).abs() < 1e-15);
    }

    #[test]
    fn pid_saturates_exactly() {
        let cfg = cfg_with(1e9, 0.0, 0.0, 1.0);
        let (_, u) = pid_step(&PidState::default(), 1.0, 0.0, &cfg);
        assert_eq!(u, 1.0);
        let (_, u) = pid_step(&PidState::default(), -1.0, 0.0, &cfg);
        assert_eq!(u, -1.0);
    }

    #[test]
    fn pid_freezes_integral_when_saturated() {
        let cfg = cfg_with(100.0, 10.0, 0.0, 1.0);
        let (st, _) = pid_step(&PidState::default(), 1.0, 0.0, &cfg);
        assert_eq!(st.integral, 0.0);
        let cfg = cfg_with(0.1, 10.0, 0.0, 1.0);
        let (st, _) = pid_step(&PidState::default(), 0.1, 0.0, &cfg);
        assert!(st.integral > 0.0);
    }

    #[test]
    fn pid_derivative_on_measurement_has_no_setpoint_kick() {
        let cfg = cfg_with(0.0, 0.0, 1.0, 100.0);
        let (st, _) = pid_step(&PidState::default(), 0.0, 0.0, &cfg);
        let (_, u) = pid_step(&st, 5.0, 0.0, &cfg);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn counter_drive_examples() {
        let (a, b) = counter_drive(1.2, 0.3);
        assert!((a - 1.5).abs() < 1e-15 && (b - 0.9).abs() < 1e-15);
        assert_eq!(counter_drive(0.0, 0.0), (0.0, 0.0));
        let (a, b) = counter_drive(-0.5, 0.2);
        assert!((a + 0.3).abs() < 1e-15 && (b + 0.7).abs() < 1e-15);
    }

    #[test]
    fn dither_examples() {
        let t = 1.0 / 66.0;
        assert_eq!(dither_term(0.0, t, 0.1), 0.1);
        assert_eq!(dither_term(1.5 / 66.0, t, 0.1), -0.1);
        assert_eq!(dither_term(123.4, t, 0.0), 0.0);
        // exact tick multiples alternate
        for k in 0..1000u32 {
            let expect = if k % 2 == 0 { 0.1 } else { -0.1 };
            assert_eq!(dither_term(f64::from(k) * t, t, 0.1), expect, "tick {k}");
        }
    }

    #[test]
    fn trajectory_examples() {
        let sq = TrajectorySpec::Square {
            amplitude: 0.1,
            period: 2.0,
        };
        assert_eq!(trajectory_sample(&sq, 0.5), 0.1);
        assert_eq!(trajectory_sample(&sq, 1.5), -0.1);
        let st = TrajectorySpec::Staircase {
            step_size: 0.175_f64.to_radians(),
            step_dwell: 2.0,
            n_steps: 10,
        };
        assert!((trajectory_sample(&st, 5.0) - 0.35_f64.to_radians()).abs() < 1e-15);
        assert!((trajectory_sample(&st, 1e6) - 1.75_f64.to_radians()).abs() < 1e-15);
        assert_eq!(trajectory_sample(&TrajectorySpec::Hold { value: 0.3 }, 42.0), 0.3);
        let sc = TrajectorySpec::Scripted {
            points: vec![(1.0, 0.2), (2.0, -0.1)],
        };
        assert_eq!(trajectory_sample(&sc, 0.5), 0.0);
        assert_eq!(trajectory_sample(&sc, 1.5), 0.2);
        assert_eq!(trajectory_sample(&sc, 9.0), -0.1);
    }

    #[test]
    fn dwells_cover_duration() {
        let st = TrajectorySpec::Staircase {
            step_size: 0.01,
            step_dwell: 2.0,
            n_steps: 3,
        };
        let d = st.dwells(8.0);
        assert_eq!(d.len(), 4);
        assert_eq!(d[3], (6.0, 8.0, 0.03));
        let sq = TrajectorySpec::Square {
            amplitude: 1.0,
            period: 4.0,
        };
        let d = sq.dwells(8.0);
        assert_eq!(d.iter().map(|x| x.2).collect::<Vec<_>>(), vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(TrajectorySpec::Square {
            amplitude: 1.0,
            period: 0.0
        }
        .validate()
        .is_err());
        assert!(TrajectorySpec::Staircase {
            step_size: 0.0,
            step_dwell: 1.0,
            n_steps: 2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let rec = TrackingRecord {
            rows: vec![TrackingRow {
                t: 0.0,
                target: 1.0,
                measured: 0.5,
                u_o: 2.0,
                u1: 3.0,
                u2: 1.0,
            }],
        };
        let mut out = Vec::new();
        rec.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "t,target,measured,u_o,u1,u2\n0,1,0.5,2,3,1\n"
        );
    }
}
