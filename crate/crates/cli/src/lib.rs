//! `deskpilot` command line: tracking experiments, the marker benchmark, IK
//! audits, scripted sessions, replay and the teleoperation server.
//!
//! Every command writes CSV (or a session log) to `--out`, or to stdout,
//! preceded by `#` lines holding the fully resolved configuration.
//! Summaries go to stdout when the data goes to a file and to stderr
//! otherwise. Exit status: 0 pass, 1 threshold fail, 2 usage or config error.

pub mod experiments;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deskpilot_core::config::{Config, ConfigError};
use deskpilot_core::kinematics::RobotCommand18;
use deskpilot_core::kinematics::Side;
use deskpilot_core::marker::{Shape, ERROR_STATS_CSV_HEADER};
use deskpilot_core::session::{load_session, replay, run_script, Script, SessionLog};
use deskpilot_service::client::run_script_remote;
use deskpilot_service::hub::HubConfig;
use deskpilot_service::server::{serve, HubHandle, ServerConfig};
use experiments::*;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(
    name = "deskpilot",
    version,
    about = "Desk-scale manipulator control and teleoperation experiments"
)]
pub struct Cli {
    /// TOML file with parameter overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-loop joint tracking of a square wave, staircase or hold.
    Track(TrackArgs),
    /// Rotating-platform pose benchmark of a marker polyhedron.
    MarkerBench(BenchArgs),
    /// FK/IK round-trip audit over random joint samples.
    IkAudit(IkArgs),
    /// Host the teleoperation service.
    Serve(ServeArgs),
    /// Run an input script headlessly and write its session log.
    Script(ScriptArgs),
    /// Re-execute a session log and check it reproduces.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WaveArg {
    Square,
    Stair,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The configured controller.
    Standard,
    /// Stiff proportional loop without dither.
    HighGain,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long, value_enum, default_value = "square")]
    pub wave: WaveArg,
    /// Default: high-gain for square waves, standard otherwise.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum)]
    pub counter_drive: Option<Switch>,
    #[arg(long, value_enum)]
    pub dither: Option<Switch>,
    /// Square amplitude, step size or hold value (deg).
    #[arg(long)]
    pub size_deg: Option<f64>,
    /// Square period or step dwell (s).
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub steps: Option<u32>,
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Cube6,
    Poly26,
    /// Both shapes at the same noise, with error ratios.
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "poly26")]
    pub shape: ShapeArg,
    /// Corner noise standard deviation (px).
    #[arg(long, conflicts_with = "calibrate")]
    pub noise: Option<f64>,
    /// Search for the noise that puts cube6 in its target error band, then
    /// compare both shapes there.
    #[arg(long)]
    pub calibrate: bool,
    #[arg(long, default_value_t = 3)]
    pub rotations: u32,
    #[arg(long)]
    pub steps_per_rot: Option<u32>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Left,
    Right,
}

#[derive(Debug, Args)]
pub struct IkArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: u32,
    #[arg(long, value_enum, default_value = "left")]
    pub side: SideArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub tick_hz: Option<f64>,
    #[arg(long)]
    pub latency_ms: Option<f64>,
    #[arg(long)]
    pub jitter_ms: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScriptArgs {
    /// Script file (JSON). Without it the built-in reach task runs.
    pub file: Option<PathBuf>,
    /// Inject an ambiguity-flagged estimate into the built-in reach task.
    #[arg(long)]
    pub inject_ambiguous: bool,
    /// Drive a running server (e.g. ws://127.0.0.1:8765/pilot) instead of a
    /// local robot.
    #[arg(long)]
    pub remote: Option<String>,
    /// Print the script that would run and exit.
    #[arg(long)]
    pub emit: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub log: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(2)
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

/// Threshold verdict of a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn of(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn exit_code(self) -> ExitCode {
        match self {
            Verdict::Pass => ExitCode::SUCCESS,
            Verdict::Fail => ExitCode::from(1),
        }
    }
}

/// Config file, then the global `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.bench.seed = s;
    }
    Ok(cfg)
}

/// `#`-prefixed header: command line summary and resolved configuration.
pub fn header(command: &str, cfg: &Config, extra: &[(&str, String)]) -> String {
    let mut h = format!("# deskpilot {command}\n");
    for (k, v) in extra {
        let _ = writeln!(h, "# {k} = {v}");
    }
    h.push_str("# --- resolved config ---\n");
    for line in cfg.to_toml_string().lines() {
        let _ = writeln!(h, "# {line}");
    }
    h
}

struct Output {
    sink: Box<dyn Write>,
}

impl Output {
    fn open(path: Option<&Path>) -> Result<Self, CliError> {
        Ok(match path {
            Some(p) => Output {
                sink: Box::new(std::io::BufWriter::new(
                    std::fs::File::create(p)
                        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", p.display())))?,
                )),
            },
            None => Output {
                sink: Box::new(std::io::stdout()),
            },
        })
    }

    fn data(&mut self, s: &str) -> Result<(), CliError> {
        self.sink.write_all(s.as_bytes()).map_err(run_err)
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.sink.flush().map_err(run_err)
    }
}

pub fn run(cli: Cli) -> Result<Verdict, CliError> {
    let cfg = resolve_config(&cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Track(a) => cmd_track(cfg, a, out),
        Command::MarkerBench(a) => cmd_marker_bench(cfg, a, out),
        Command::IkAudit(a) => cmd_ik_audit(cfg, a, out),
        Command::Serve(a) => cmd_serve(cfg, a, out),
        Command::Script(a) => cmd_script(cfg, a, out),
        Command::Replay(a) => cmd_replay(cfg, a, out),
    }
}

fn cmd_track(mut cfg: Config, a: &TrackArgs, out: Option<&Path>) -> Result<Verdict, CliError> {
    let mut setup = match a.wave {
        WaveArg::Square => TrackSetup::square(),
        WaveArg::Stair => TrackSetup::stair(),
        WaveArg::Hold => TrackSetup {
            wave: Wave::Hold,
            size: 1f64.to_radians(),
            period: 0.0,
            n_steps: 0,
            duration: 4.0,
        },
    };
    if let Some(d) = a.size_deg {
        setup.size = d.to_radians();
    }
    if let Some(p) = a.period {
        setup.period = p;
    }
    if let Some(n) = a.steps {
        setup.n_steps = n;
        if a.duration.is_none() && setup.wave == Wave::Stair {
            setup.duration = setup.period * f64::from(n + 1);
        }
    }
    if let Some(d) = a.duration {
        setup.duration = d;
    }
    if !(setup.duration > 0.0) {
        return Err(CliError::Usage("--duration must be > 0".into()));
    }
    setup.spec().validate().map_err(CliError::Usage)?;

    let preset = a.preset.unwrap_or(if setup.wave == Wave::Square {
        Preset::HighGain
    } else {
        Preset::Standard
    });
    let mut ctl = match preset {
        Preset::HighGain => preset_for(Wave::Square, &cfg.controller),
        Preset::Standard => cfg.controller,
    };
    if let Some(s) = a.counter_drive {
        ctl.counter_drive_enabled = s.on();
    }
    if let Some(s) = a.dither {
        ctl.dither_enabled = s.on();
    }
    ctl.validate().map_err(CliError::Usage)?;
    cfg.controller = ctl;

    let report = track(&cfg, &ctl, &setup).map_err(run_err)?;
    let mut o = Output::open(out)?;
    let extra = [
        ("wave", format!("{:?}", setup.wave).to_lowercase()),
        ("size_rad", setup.size.to_string()),
        ("period_s", setup.period.to_string()),
        ("steps", setup.n_steps.to_string()),
        ("duration_s", setup.duration.to_string()),
    ];
    o.data(&header("track", &cfg, &extra))?;
    let mut csv = Vec::new();
    report.record.write_csv(&mut csv).map_err(run_err)?;
    o.data(&String::from_utf8_lossy(&csv))?;
    o.finish()?;

    let lsb = report.lsb;
    let mut s = String::from("dwell,start,end,target_rad,peak_to_peak_lsb,terminal_error_lsb\n");
    for (i, d) in report.dwells.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{:.3},{:.3}",
            d.start,
            d.end,
            d.target,
            d.peak_to_peak / lsb,
            d.terminal_error / lsb
        );
    }
    let passed = report.passed(setup.wave);
    if report.oscillating() {
        s.push_str("oscillation detected: every dwell swings by at least the backlash width\n");
    }
    let _ = write!(
        s,
        "max peak-to-peak {:.3} LSB, max terminal error {:.3} LSB, mean terminal error {:.3} LSB: {}",
        report.max_peak_to_peak() / lsb,
        report.max_terminal_error() / lsb,
        report.mean_terminal_error() / lsb,
        if passed { "PASS" } else { "FAIL" }
    );
    summary(out, &s);
    Ok(Verdict::of(passed))
}

fn summary(out: Option<&Path>, s: &str) {
    if out.is_some() {
        println!("{s}");
    } else {
        eprintln!("{s}");
    }
}

fn cmd_marker_bench(mut cfg: Config, a: &BenchArgs, out: Option<&Path>) -> Result<Verdict, CliError> {
    if a.rotations < 1 || a.parallel < 1 {
        return Err(CliError::Usage("--rotations and --parallel must be >= 1".into()));
    }
    cfg.bench.n_rotations = a.rotations;
    if let Some(n) = a.steps_per_rot {
        cfg.bench.steps_per_rot = n;
    }
    if let Some(s) = a.noise {
        if !(s >= 0.0) {
            return Err(CliError::Usage("--noise must be >= 0".into()));
        }
        cfg.bench.noise_px = s;
    }
    let calib = if a.calibrate {
        let c = calibrate_sigma(&cfg, a.parallel).map_err(run_err)?;
        cfg.bench.noise_px = c.sigma;
        Some(c)
    } else {
        None
    };
    let sigma = cfg.bench.noise_px;
    let both = a.calibrate || a.shape == ShapeArg::Both;

    let mut o = Output::open(out)?;
    let mut extra = vec![
        ("shape", format!("{:?}", a.shape).to_lowercase()),
        ("parallel", a.parallel.to_string()),
    ];
    if let Some(c) = &calib {
        extra.push(("calibrated_sigma_px", c.sigma.to_string()));
        extra.push(("calibration_runs", c.evaluations.to_string()));
    }
    o.data(&header("marker-bench", &cfg, &extra))?;
    o.data(&format!("{ERROR_STATS_CSV_HEADER}\n"))?;
    let verdict = if both {
        let cmp = compare(&cfg, sigma, a.parallel).map_err(run_err)?;
        o.data(&format!(
            "{}\n{}\n",
            cmp.cube.csv_row(Shape::Cube6, sigma),
            cmp.poly.csv_row(Shape::Poly26, sigma)
        ))?;
        summary(
            out,
            &format!(
            "sigma {sigma} px: poly26/cube6 rotation {:.3}, translation {:.3} (reductions {:.0}% / {:.0}%), poly26 ambiguity rate {}: {}",
            cmp.rot_ratio(),
            cmp.trans_ratio(),
            100.0 * (1.0 - cmp.rot_ratio()),
            100.0 * (1.0 - cmp.trans_ratio()),
            cmp.poly.ambiguity_rate,
            if cmp.passed() { "PASS" } else { "FAIL" }
        ));
        Verdict::of(cmp.passed())
    } else {
        let shape = if a.shape == ShapeArg::Cube6 {
            Shape::Cube6
        } else {
            Shape::Poly26
        };
        let st = bench(&cfg, shape, sigma, a.parallel).map_err(run_err)?;
        o.data(&format!("{}\n", st.csv_row(shape, sigma)))?;
        summary(
            out,
            &format!(
                "{shape} sigma {sigma} px: mean rotation {:.4} deg, mean translation {:.4} mm, {} of {} steps failed",
                st.mean_rot_deg, st.mean_trans_mm, st.n_failed, st.n_steps
            ),
        );
        Verdict::of(st.n_failed < st.n_steps)
    };
    o.finish()?;
    Ok(verdict)
}

fn side(s: SideArg) -> Side {
    match s {
        SideArg::Left => Side::Left,
        SideArg::Right => Side::Right,
    }
}

fn cmd_ik_audit(cfg: Config, a: &IkArgs, out: Option<&Path>) -> Result<Verdict, CliError> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be >= 1".into()));
    }
    let r = ik_audit(&cfg.robot, side(a.side), a.samples, cfg.seed);
    let mut o = Output::open(out)?;
    let extra = [
        ("samples", a.samples.to_string()),
        ("side", format!("{:?}", a.side).to_lowercase()),
    ];
    o.data(&header("ik-audit", &cfg, &extra))?;
    let rows = [
        (
            "max_position_error_m",
            r.max_pos_err.to_string(),
            IK_POS_TOL.to_string(),
            r.max_pos_err <= IK_POS_TOL,
        ),
        (
            "max_orientation_error_rad",
            r.max_rot_err.to_string(),
            IK_ROT_TOL.to_string(),
            r.max_rot_err <= IK_ROT_TOL,
        ),
        ("solve_failures", r.failures.to_string(), "0".into(), r.failures == 0),
        (
            "branch_flips_with_prev",
            r.branch_flips.to_string(),
            "0".into(),
            r.branch_flips == 0,
        ),
        (
            "alternate_branch_without_prev",
            r.alternate_branch.to_string(),
            "-".into(),
            true,
        ),
        (
            "unreachable_rejected",
            format!("{}/{}", r.unreachable_rejected, r.unreachable_samples),
            "all".into(),
            r.unreachable_rejected == r.unreachable_samples,
        ),
        (
            "reach_750mm_solvable",
            r.boundary_solvable.to_string(),
            "true".into(),
            r.boundary_solvable,
        ),
        (
            "reach_751mm_unreachable",
            r.beyond_boundary_rejected.to_string(),
            "true".into(),
            r.beyond_boundary_rejected,
        ),
    ];
    let mut csv = String::from("check,value,threshold,pass\n");
    for (k, v, t, p) in rows {
        let _ = writeln!(csv, "{k},{v},{t},{p}");
    }
    o.data(&csv)?;
    summary(
        out,
        &format!(
            "{} samples: max position error {:e} m, max orientation error {:e} rad: {}",
            r.samples,
            r.max_pos_err,
            r.max_rot_err,
            if r.passed() { "PASS" } else { "FAIL" }
        ),
    );
    o.finish()?;
    Ok(Verdict::of(r.passed()))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(run_err)
}

fn cmd_serve(mut cfg: Config, a: &ServeArgs, out: Option<&Path>) -> Result<Verdict, CliError> {
    let s = &mut cfg.service;
    if let Some(p) = a.port {
        s.port = p;
    }
    if let Some(t) = a.tick_hz {
        s.tick_hz = t;
    }
    if let Some(l) = a.latency_ms {
        s.latency_ms = l;
    }
    if let Some(j) = a.jitter_ms {
        s.jitter_ms = j;
    }
    cfg.teleop.tick_hz = cfg.service.tick_hz;
    cfg.validate()?;
    let s = cfg.service;
    let server = ServerConfig {
        hub: HubConfig {
            robot: cfg.robot,
            teleop: cfg.teleop.clone(),
            initial_lift: s.initial_lift,
            record: out.is_some(),
        },
        latency_ms: s.latency_ms,
        jitter_ms: s.jitter_ms,
        seed: cfg.seed,
    };
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", s.port))
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind port {}: {e}", s.port)))?;
        let addr = listener.local_addr().map_err(run_err)?;
        eprintln!("serving ws://{addr}/pilot at {} Hz; Ctrl-C stops", s.tick_hz);
        let hub = HubHandle::spawn(server);
        tokio::select! {
            r = serve(listener, hub.clone()) => r.map_err(run_err)?,
            _ = tokio::signal::ctrl_c() => {}
        }
        if let Some(path) = out {
            if let Some(log) = hub.snapshot().await.and_then(|s| s.log) {
                deskpilot_core::session::save_session(&log, path).map_err(run_err)?;
                eprintln!("{} ticks written to {}", log.records.len(), path.display());
            }
        }
        hub.shutdown();
        Ok(Verdict::Pass)
    })
}

fn load_script(a: &ScriptArgs, cfg: &Config) -> Result<Script, CliError> {
    match &a.file {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            let script: Script =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad script: {e}")))?;
            script.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(script)
        }
        None => Ok(reach_task(
            &cfg.teleop,
            &cfg.robot,
            cfg.service.initial_lift,
            a.inject_ambiguous,
        )),
    }
}

/// Goal distance allowed at the end of a scripted reach (m).
pub const GOAL_TOLERANCE: f64 = 5e-3;

fn cmd_script(cfg: Config, a: &ScriptArgs, out: Option<&Path>) -> Result<Verdict, CliError> {
    let script = load_script(a, &cfg)?;
    if a.emit {
        let mut o = Output::open(out)?;
        o.data(&serde_json::to_string_pretty(&script).map_err(run_err)?)?;
        o.data("\n")?;
        o.finish()?;
        return Ok(Verdict::Pass);
    }
    let (log, final_state): (Option<SessionLog>, RobotCommand18) = match &a.remote {
        None => {
            let r = run_script(
                &script,
                cfg.robot,
                cfg.teleop.clone(),
                cfg.service.initial_lift,
                cfg.seed,
            )
            .map_err(run_err)?;
            (Some(r.log), r.pilot.world.state_vector())
        }
        Some(url) => {
            let settle = std::time::Duration::from_secs(1);
            let r = runtime()?
                .block_on(run_script_remote(url, &script, cfg.teleop.tick_hz, cfg.seed, settle))
                .map_err(run_err)?;
            (None, r.final_state.state)
        }
    };
    let mut ok = true;
    let mut s = String::new();
    if let Some(goal) = script.goal_left {
        let d = state_goal_distance(&final_state, &cfg.robot, goal);
        ok &= d <= GOAL_TOLERANCE;
        let _ = write!(s, "final left end-effector distance to goal {:.3} mm", d * 1e3);
    }
    if let Some(log) = &log {
        let jump = max_ee_jump(log, Side::Left);
        let bound = ee_jump_bound(&cfg.teleop);
        ok &= jump <= bound + 1e-12;
        let _ = write!(
            s,
            "{}largest command step {:.3} mm per tick (bound {:.3}), {} ticks",
            if s.is_empty() { "" } else { "; " },
            jump * 1e3,
            bound * 1e3,
            log.records.len()
        );
        let mut o = Output::open(out)?;
        o.data(&log.to_text())?;
        o.finish()?;
    }
    summary(out, &format!("{s}: {}", if ok { "PASS" } else { "FAIL" }));
    Ok(Verdict::of(ok))
}

fn cmd_replay(cfg: Config, a: &ReplayArgs, out: Option<&Path>) -> Result<Verdict, CliError> {
    let log = load_session(&a.log).map_err(|e| CliError::Usage(e.to_string()))?;
    let r = replay(&log);
    let mut o = Output::open(out)?;
    o.data(&header("replay", &cfg, &[("log", a.log.display().to_string())]))?;
    let w = &r.final_world;
    o.data(&format!(
        "records,max_divergence,final_t,base_x,base_y,base_heading\n{},{},{},{},{},{}\n",
        r.records, r.max_divergence, w.time, w.base.x, w.base.y, w.base.heading
    ))?;
    o.finish()?;
    let ok = r.max_divergence == 0.0;
    summary(
        out,
        &format!(
            "{} records, max divergence {}: {}",
            r.records,
            r.max_divergence,
            if ok { "PASS" } else { "FAIL" }
        ),
    );
    Ok(Verdict::of(ok))
}
