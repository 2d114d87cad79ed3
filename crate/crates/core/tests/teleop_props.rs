use deskpilot_core::kinematics::*;
use deskpilot_core::marker::PoseEstimate;
use deskpilot_core::pose::Pose6D;
use deskpilot_core::session::*;
use deskpilot_core::teleop::*;
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

fn estimate(pose: Pose6D, t: f64) -> PoseEstimate {
    PoseEstimate {
        pose,
        rms_reprojection: 0.3,
        n_tags_used: 4,
        ambiguity_flag: false,
        converged: true,
        timestamp: t,
    }
}

fn pedals() -> impl Strategy<Value = PedalState> {
    prop::array::uniform4(0.0..1.0f64).prop_map(PedalState)
}

fn handle_at(x: f64, y: f64, z: f64) -> Pose6D {
    Pose6D::new(UnitQuaternion::from_euler_angles(0.2, 0.4, 0.1), Vector3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn walking_moves_only_the_base(p in pedals()) {
        let robot = RobotConfig::default();
        let cfg = TeleopConfig::default();
        let world = SimWorld::new(&cfg, 0.7);
        let state = TeleopState::new(world.hold_command());
        let partial = pedal_map(&state, &p, &robot, &cfg);
        let (cmd, _) = assemble_command(&world, &state, [None, None], &partial, &robot, &cfg);
        let hold = world.hold_command();
        prop_assert_eq!(&cmd.0[..slot::BASE_FORWARD], &hold.0[..slot::BASE_FORWARD]);
    }

    #[test]
    fn operation_never_moves_the_base(p in pedals(), lock in any::<[bool; 2]>()) {
        let robot = RobotConfig::default();
        let cfg = TeleopConfig::default();
        let world = SimWorld::new(&cfg, 0.7);
        let mut state = TeleopState::new(world.hold_command());
        state.mode = TeleopMode::Operation;
        state.gripper_locked = lock;
        let partial = pedal_map(&state, &p, &robot, &cfg);
        let (cmd, _) = assemble_command(&world, &state, [None, None], &partial, &robot, &cfg);
        prop_assert_eq!(cmd.base(), [0.0, 0.0]);
        for (i, side) in SIDES.into_iter().enumerate() {
            if lock[i] {
                prop_assert_eq!(cmd.0[slot::gripper(side)], world.arm(side).gripper);
            }
        }
    }

    #[test]
    fn clutch_target_depends_only_on_handle_displacement(
        start in (-0.1..0.1f64, -0.1..0.1f64, 0.3..0.6f64),
        shift in (-0.05..0.05f64, -0.05..0.05f64, -0.05..0.05f64),
        offset in (-0.1..0.1f64, -0.1..0.1f64, -0.1..0.1f64),
    ) {
        let cfg = TeleopConfig::default();
        let ee = Pose6D::from_translation(0.3, 0.6, 0.8);
        let run = |o: Vector3<f64>| {
            let mut s = TeleopState::default();
            s.clutch_engaged[0] = true;
            let h0 = handle_at(start.0 + o.x, start.1 + o.y, start.2 + o.z);
            let (s, t0, st0) = retarget(&s, Side::Left, &estimate(h0, 0.0), &ee, 0.0, &cfg);
            assert_eq!(st0, RetargetStatus::Captured);
            assert_eq!(t0, Some(ee));
            let h1 = Pose6D::new(h0.rotation, h0.translation + Vector3::new(shift.0, shift.1, shift.2) * 0.5);
            // Ten ticks later keeps the move under the speed gate.
            let later = 10.0 * cfg.tick();
            let (_, t1, st1) = retarget(&s, Side::Left, &estimate(h1, later), &ee, later, &cfg);
            assert_eq!(st1, RetargetStatus::Accepted);
            t1.unwrap()
        };
        let a = run(Vector3::zeros());
        let b = run(Vector3::new(offset.0, offset.1, offset.2));
        prop_assert!((a.translation - b.translation).norm() < 1e-12);
        prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
        // Camera +x is body +y.
        prop_assert!((a.translation.y - ee.translation.y - 0.5 * shift.0).abs() < 1e-12);
    }

    #[test]
    fn rejected_estimates_hold_the_previous_target(kind in 0usize..4) {
        let cfg = TeleopConfig::default();
        let ee = Pose6D::from_translation(0.3, 0.6, 0.8);
        let mut s = TeleopState::default();
        s.clutch_engaged[0] = true;
        let h0 = handle_at(0.0, 0.0, 0.45);
        let (s, _, _) = retarget(&s, Side::Left, &estimate(h0, 0.0), &ee, 0.0, &cfg);
        let h1 = handle_at(0.01, 0.0, 0.45);
        let (s, t1, _) = retarget(&s, Side::Left, &estimate(h1, cfg.tick()), &ee, cfg.tick(), &cfg);
        let now = 2.0 * cfg.tick();
        let mut bad = estimate(handle_at(0.02, 0.0, 0.45), now);
        let expect = match kind {
            0 => { bad.ambiguity_flag = true; RetargetStatus::RejectedAmbiguous }
            1 => { bad.rms_reprojection = 3.5; RetargetStatus::RejectedResidual }
            2 => { bad.pose.translation.x += 0.5; RetargetStatus::RejectedSpeed }
            _ => { bad.timestamp = now - 3.0 * cfg.tick(); RetargetStatus::Stale }
        };
        let (s2, t2, st) = retarget(&s, Side::Left, &bad, &ee, now, &cfg);
        prop_assert_eq!(st, expect);
        prop_assert_eq!(t2, t1);
        prop_assert_eq!(s2, s);
    }
}

#[test]
fn bound_keys_toggle_and_unbound_keys_do_nothing() {
    let b = KeyBindings::default();
    let s = TeleopState::default();
    let m = handle_key(&s, &b.toggle_mode, &b);
    assert_eq!(m.mode, TeleopMode::Operation);
    assert_eq!(handle_key(&m, &b.toggle_mode, &b).mode, TeleopMode::Walking);
    assert_eq!(handle_key(&s, "q", &b), s);
    let locked = handle_key(&s, &b.lock_right, &b);
    assert_eq!(locked.gripper_locked, [false, true]);
    let reset = handle_key(&handle_key(&s, &b.clutch_left, &b), &b.reset_left, &b);
    assert_eq!(reset.clutch_engaged, [false, false]);
    assert!(reset.rehome[0]);
}

fn walk_script(duration: f64) -> Script {
    Script {
        duration,
        tracker: TrackerConfig::default(),
        events: vec![
            ScriptEvent {
                t: 0.0,
                pedals: Some([0.6, 0.0, 0.3, 0.0]),
                ..Default::default()
            },
            ScriptEvent {
                t: duration / 3.0,
                pedals: Some([0.0, 0.4, 0.0, 0.5]),
                ..Default::default()
            },
            ScriptEvent {
                t: 2.0 * duration / 3.0,
                pedals: Some([0.0; 4]),
                ..Default::default()
            },
        ],
        goal_left: None,
    }
}

#[test]
fn minute_session_records_every_tick_and_replays() {
    let robot = RobotConfig::default();
    let cfg = TeleopConfig::default();
    let run = run_script(&walk_script(60.0), robot, cfg.clone(), 0.8, 4).unwrap();
    assert_eq!(run.log.records.len(), 1800);
    let rep = replay(&run.log);
    assert_eq!(rep.max_divergence, 0.0);
    assert_eq!(rep.final_world, run.pilot.world);

    // Base slots of the state vector are the executed displacements.
    let mut pose = run.log.header.initial.base;
    for r in run.log.records.iter().skip(1) {
        pose = base_arc(&pose, r.state.0[slot::BASE_FORWARD], r.state.0[slot::BASE_TURN]);
    }
    let last = run.pilot.world.last_base;
    pose = base_arc(&pose, last[0], last[1]);
    let end = run.pilot.world.base;
    assert!((pose.x - end.x).abs() < 1e-12 && (pose.y - end.y).abs() < 1e-12);
    assert!(wrap_angle(pose.heading - end.heading).abs() < 1e-12);
    let travelled: f64 = run
        .log
        .records
        .iter()
        .map(|r| r.state.0[slot::BASE_FORWARD].abs())
        .sum();
    assert!(travelled > 1.0);
}

#[test]
fn session_file_round_trip_is_bit_exact() {
    let robot = RobotConfig::default();
    let cfg = TeleopConfig::default();
    let run = run_script(&walk_script(3.0), robot, cfg, 0.8, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    save_session(&run.log, &path).unwrap();
    let back = load_session(&path).unwrap();
    assert_eq!(back, run.log);
    assert_eq!(back.to_text(), run.log.to_text());

    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"t\":0.0", "\"t\":0.5", 1);
    assert!(matches!(
        SessionLog::from_text(&tampered),
        Err(SessionError::CorruptLog(_))
    ));
}

#[test]
fn scripted_runs_are_deterministic() {
    let robot = RobotConfig::default();
    let cfg = TeleopConfig::default();
    let pilot = Pilot::new(robot, cfg.clone(), 0.8);
    let ee = pilot.world.ee_pose(Side::Left, &robot).unwrap();
    let goal = [ee.translation.x + 0.1, ee.translation.y - 0.08, ee.translation.z + 0.05];
    let script = reach_script(&ee, goal, &handle_at(0.0, 0.0, 0.45), &cfg, 3.0, 5.0, Some(2.0));
    let a = run_script(&script, robot, cfg.clone(), 0.8, 21).unwrap();
    let b = run_script(&script, robot, cfg.clone(), 0.8, 21).unwrap();
    assert_eq!(a.log, b.log);
    let d = goal_distance(&a.pilot.world, &robot, goal).unwrap();
    assert!(d < 5e-3, "goal distance {d}");
    let injected = a
        .outputs
        .iter()
        .filter(|o| o.status[0] == RetargetStatus::RejectedAmbiguous)
        .count();
    assert_eq!(injected, 1);
    assert!(max_ee_command_jump(&a.outputs, &robot, Side::Left) <= cfg.handle_speed * cfg.tick());
}

#[test]
fn silence_holds_every_joint_and_stops_the_base() {
    let robot = RobotConfig::default();
    let cfg = TeleopConfig::default();
    let mut pilot = Pilot::new(robot, cfg, 0.8);
    let input = TickInput {
        pedals: PedalState([1.0, 0.0, 0.0, 0.0]),
        ..Default::default()
    };
    for _ in 0..10 {
        pilot.tick(&input);
    }
    let before = pilot.world;
    for _ in 0..30 {
        let out = pilot.hold_tick();
        assert_eq!(out.command.base(), [0.0, 0.0]);
    }
    let after = pilot.world;
    assert_eq!(after.base, before.base);
    assert_eq!(
        (after.left, after.right, after.lift),
        (before.left, before.right, before.lift)
    );
}
