use std::path::Path;
use std::process::{Command, Output};

fn deskpilot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskpilot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn track_outcomes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let off = dir.path().join("off.csv");
    let o = deskpilot(&[
        "track",
        "--wave",
        "square",
        "--counter-drive",
        "off",
        "--out",
        off.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("oscillation detected"));

    let o = deskpilot(&[
        "track",
        "--wave",
        "stair",
        "--dither",
        "on",
        "--out",
        dir.path().join("on.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        &["track", "--wave", "square"][..],
        &["marker-bench", "--shape", "cube6", "--noise", "0.5"],
        &["script"],
    ] {
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        for p in [&a, &b] {
            let mut args = cmd.to_vec();
            args.extend(["--seed", "11", "--out", p.to_str().unwrap()]);
            deskpilot(&args);
        }
        assert!(!read(&a).is_empty());
        assert_eq!(read(&a), read(&b), "{cmd:?}");
    }
}

#[test]
fn output_header_embeds_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[controller.gains]\nkp = 321.0\n").unwrap();
    let out = dir.path().join("t.csv");
    let o = deskpilot(&[
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "track",
        "--wave",
        "hold",
        "--preset",
        "standard",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(code(&o) <= 1);
    let text = read(&out);
    let header: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
    assert!(header.contains(&"# kp = 321.0"), "{header:?}");
    assert!(header.contains(&"# seed = 9"));
    let body = &text.lines().nth(header.len()).unwrap();
    assert_eq!(*body, "t,target,measured,u_o,u1,u2");
}

#[test]
fn bench_defaults_to_three_rotations_and_threads_do_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("1.csv");
    let three = dir.path().join("3.csv");
    let run = |n: &str, p: &Path| {
        deskpilot(&[
            "marker-bench",
            "--shape",
            "both",
            "--noise",
            "0.5",
            "--steps-per-rot",
            "24",
            "--parallel",
            n,
            "--out",
            p.to_str().unwrap(),
        ])
    };
    run("1", &one);
    run("3", &three);
    let strip = |s: String| {
        s.lines()
            .filter(|l| !l.starts_with("# parallel"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(read(&one)), strip(read(&three)));
    assert!(read(&one).contains("# n_rotations = 3"));
}

#[test]
fn noiseless_poly26_bench_is_exact() {
    let o = deskpilot(&[
        "marker-bench",
        "--shape",
        "poly26",
        "--noise",
        "0",
        "--steps-per-rot",
        "30",
    ]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    let row: Vec<f64> = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .skip(2)
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(row.iter().all(|v| *v < 1e-9), "{row:?}");
}

#[test]
fn ik_audit_passes() {
    let o = deskpilot(&["ik-audit", "--samples", "2000", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("reach_751mm_unreachable,true,true,true"));
}

#[test]
fn script_then_replay_has_no_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("reach.json");
    let log = dir.path().join("s.jsonl");
    let o = deskpilot(&[
        "script",
        "--inject-ambiguous",
        "--emit",
        "--out",
        script.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let o = deskpilot(&[
        "script",
        script.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        log.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = deskpilot(&["replay", log.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("max divergence 0"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[plant]\nbacklash_width = 1.0\n").unwrap();
    assert_eq!(code(&deskpilot(&["--config", bad.to_str().unwrap(), "track"])), 2);
    assert_eq!(code(&deskpilot(&["--config", "/no/such/file.toml", "track"])), 2);
    assert_eq!(code(&deskpilot(&["track", "--wave", "triangle"])), 2);
    assert_eq!(code(&deskpilot(&["frobnicate"])), 2);
    assert_eq!(code(&deskpilot(&["marker-bench", "--rotations", "0"])), 2);
    assert_eq!(code(&deskpilot(&["replay", "/no/such/log.jsonl"])), 2);
    let tampered = dir.path().join("t.jsonl");
    std::fs::write(&tampered, "{}\n").unwrap();
    assert_eq!(code(&deskpilot(&["replay", tampered.to_str().unwrap()])), 2);
}
