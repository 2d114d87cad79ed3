use deskpilot_core::marker::*;
use deskpilot_core::pose::{pose_error, Pose6D};
use nalgebra::{Point2, Point3, UnitQuaternion, Vector3, Vector6};
use proptest::prelude::*;

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::default()
}

/// Poses that keep a 5 cm handle comfortably inside the default image.
fn handle_pose() -> impl Strategy<Value = Pose6D> {
    (
        -0.05..0.05f64,
        -0.03..0.03f64,
        0.35..0.7f64,
        -3.0..3.0f64,
        -1.4..1.4f64,
        -3.0..3.0f64,
    )
        .prop_map(|(x, y, z, r, p, yaw)| {
            Pose6D::new(UnitQuaternion::from_euler_angles(r, p, yaw), Vector3::new(x, y, z))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn noiseless_poly26_round_trip(truth in handle_pose()) {
        let geom = build_polyhedron(Shape::Poly26, 0.05, 0.8).unwrap();
        let obs = synth_observe(&geom, &truth, &cam(), 0.0, 15.0, 1).unwrap();
        let est = solve_pose(&obs, &geom, &cam(), None).unwrap();
        let (deg, mm) = pose_error(&est.pose, &truth);
        prop_assert!(deg < 1e-6 && mm < 1e-6, "{deg} deg {mm} mm");
        prop_assert!(!est.ambiguity_flag);
        prop_assert!(est.rms_reprojection < 1e-6);
    }

    #[test]
    fn jacobian_matches_central_differences(truth in handle_pose()) {
        let geom = build_polyhedron(Shape::Poly26, 0.05, 0.8).unwrap();
        let obs = synth_observe(&geom, &truth, &cam(), 0.5, 15.0, 3).unwrap();
        let (corr, _) = correspondences(&obs, &geom);
        let jac = reprojection_jacobian(&truth, &corr, &cam());
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = reprojection_residuals(&perturb(&truth, &d), &corr, &cam()).unwrap();
            let minus = reprojection_residuals(&perturb(&truth, &(-d)), &corr, &cam()).unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            let col = jac.column(k);
            let scale = numeric.norm().max(1.0);
            prop_assert!((col - &numeric).norm() / scale < 1e-5, "column {k}");
        }
    }
}

#[test]
fn projection_follows_pinhole_convention() {
    // Handle shifted right and down in the camera, rotated about camera y.
    let truth = Pose6D::new(
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.4),
        Vector3::new(0.04, 0.02, 0.5),
    );
    let geom = build_polyhedron(Shape::Poly26, 0.05, 0.8).unwrap();
    let c = cam();
    let obs = synth_observe(&geom, &truth, &c, 0.0, 15.0, 0).unwrap();
    for o in &obs.tags {
        let tag = geom.tag(o.id).unwrap();
        for (corner, px) in tag.corners.iter().zip(&o.corners) {
            // Hand-rolled rotation about y then translation.
            let (s, co) = 0.4f64.sin_cos();
            let x = co * corner.x + s * corner.z + 0.04;
            let y = corner.y + 0.02;
            let z = -s * corner.x + co * corner.z + 0.5;
            let expect = Point2::new(c.fx * x / z + c.cx, c.fy * y / z + c.cy);
            assert!((expect - px).norm() < 1e-9);
        }
    }
    let est = solve_pose(&obs, &geom, &c, None).unwrap();
    assert!(est.pose.translation.x > 0.0 && est.pose.translation.y > 0.0);
    let origin = est.pose.transform_point(&Point3::origin());
    assert!((origin.coords - truth.translation).norm() < 1e-9);
}

#[test]
fn error_grows_with_noise() {
    let c = cam();
    let mut prev = -1.0;
    for sigma in [0.0, 0.25, 0.5, 1.0] {
        let cfg = BenchConfig {
            noise_px: sigma,
            n_rotations: 1,
            steps_per_rot: 60,
            seed: 11,
            ..BenchConfig::default()
        };
        let s = rotating_platform_bench(Shape::Poly26, &c, &cfg, 1).unwrap();
        assert!(s.mean_rot_deg >= prev, "sigma {sigma}: {} < {prev}", s.mean_rot_deg);
        assert_eq!(s.n_failed, 0);
        prev = s.mean_rot_deg;
    }
}

#[test]
fn poly26_sees_three_tags_from_every_direction() {
    let geom = build_polyhedron(Shape::Poly26, 0.05, 0.8).unwrap();
    assert!(visibility_audit(&geom, 10_000, 15.0, 5) >= 3);
    let cube = build_polyhedron(Shape::Cube6, 0.05, 0.8).unwrap();
    assert!(visibility_audit(&cube, 10_000, 15.0, 5) <= 1);
}

#[test]
fn face_on_single_tag_is_sometimes_ambiguous() {
    let geom = build_polyhedron(Shape::Cube6, 0.05, 0.8).unwrap();
    let c = cam();
    // Tag 0 faces the camera head-on.
    let n = geom.tags[0].normal;
    let rot = UnitQuaternion::rotation_between(&n, &-Vector3::z()).unwrap();
    let truth = Pose6D::new(rot, Vector3::new(0.0, 0.0, 0.6));
    let mut flagged = 0;
    let mut single = 0;
    for seed in 0..200 {
        let obs = synth_observe(&geom, &truth, &c, 1.0, 15.0, seed).unwrap();
        if obs.tags.len() != 1 {
            continue;
        }
        single += 1;
        if solve_pose(&obs, &geom, &c, None).unwrap().ambiguity_flag {
            flagged += 1;
        }
    }
    assert_eq!(single, 200);
    assert!(flagged > 0, "no ambiguity over {single} single-tag views");
}

#[test]
fn poly26_bench_never_flags_ambiguity() {
    let cfg = BenchConfig {
        noise_px: 1.0,
        ..BenchConfig::default()
    };
    let s = rotating_platform_bench(Shape::Poly26, &cam(), &cfg, 3).unwrap();
    assert_eq!(s.ambiguity_rate, 0.0);
    assert_eq!(s.n_steps, 360);
}

#[test]
fn bench_is_thread_count_invariant() {
    let cfg = BenchConfig {
        noise_px: 0.5,
        steps_per_rot: 30,
        ..BenchConfig::default()
    };
    let a = rotating_platform_bench(Shape::Cube6, &cam(), &cfg, 1).unwrap();
    let b = rotating_platform_bench(Shape::Cube6, &cam(), &cfg, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shape_names_parse() {
    assert_eq!("cube6".parse::<Shape>().unwrap(), Shape::Cube6);
    assert_eq!(Shape::Poly26.to_string(), "poly26");
    assert!(matches!("dodeca".parse::<Shape>(), Err(MarkerError::InvalidShape(_))));
}
