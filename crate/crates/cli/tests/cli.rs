use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gbp_ba::dataset;
use tempfile::TempDir;

fn gbp_ba(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbp-ba"))
        .args(args)
        .env("GBP_BA_OUT", out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = gbp_ba(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Checks every `file: header` line and the JSON key set against a golden file.
fn assert_golden(name: &str, dir: &Path) {
    let golden = fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name),
    )
    .unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    for line in golden.lines() {
        let (file, expected) = line.split_once(": ").unwrap();
        match file {
            "summary.json" => {
                let mut keys: Vec<&str> = summary
                    .as_object()
                    .unwrap()
                    .keys()
                    .map(String::as_str)
                    .collect();
                keys.sort_unstable();
                assert_eq!(keys.join(","), expected, "{name}: summary keys");
            }
            "schema" => assert_eq!(summary["schema"], expected),
            csv => {
                let text = fs::read_to_string(dir.join(csv)).unwrap();
                assert_eq!(
                    text.lines().next().unwrap(),
                    expected,
                    "{name}: {csv} header"
                );
            }
        }
    }
}

#[test]
fn gen_is_deterministic_and_loadable() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.txt");
    let b = tmp.path().join("b.txt");
    for f in [&a, &b] {
        ok(
            &[
                "gen",
                "--kf",
                "10",
                "--lm",
                "100",
                "--seed",
                "1",
                "--file",
                f.to_str().unwrap(),
            ],
            tmp.path(),
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let p = dataset::load(&a).unwrap();
    assert_eq!((p.keyframes.len(), p.landmarks.len()), (10, 100));
}

#[test]
fn gen_labels_outliers() {
    let tmp = TempDir::new().unwrap();
    ok(&["gen", "--outliers", "0.1", "--seed", "2"], tmp.path());
    let p = dataset::load(tmp.path().join("problem.txt")).unwrap();
    let labelled = p.outlier_labels().iter().filter(|o| **o).count();
    assert_eq!(
        labelled,
        (0.1 * p.measurements.len() as f64).round() as usize
    );
}

#[test]
fn solve_converges_and_pins_schema() {
    let tmp = TempDir::new().unwrap();
    ok(
        &[
            "solve",
            "--kf",
            "10",
            "--lm",
            "100",
            "--seed",
            "1",
            "--baseline",
            "lm",
        ],
        tmp.path(),
    );
    assert_golden("solve.txt", tmp.path());
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(s["converged"], true);
    assert!(s["final_are_px"].as_f64().unwrap() < 1.5);
    assert!(s["baseline"]["final_are_px"].as_f64().unwrap() < 1.5);
}

#[test]
fn zero_iterations_emit_initial_row_only() {
    let tmp = TempDir::new().unwrap();
    ok(&["solve", "--max-iters", "0"], tmp.path());
    let trace = fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    assert!(trace.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn solve_output_is_independent_of_workers() {
    let one = TempDir::new().unwrap();
    let four = TempDir::new().unwrap();
    ok(
        &[
            "solve",
            "--seed",
            "4",
            "--workers",
            "1",
            "--max-iters",
            "60",
        ],
        one.path(),
    );
    ok(
        &[
            "solve",
            "--seed",
            "4",
            "--workers",
            "4",
            "--max-iters",
            "60",
        ],
        four.path(),
    );
    assert_eq!(
        fs::read(one.path().join("trace.csv")).unwrap(),
        fs::read(four.path().join("trace.csv")).unwrap()
    );
}

#[test]
fn solves_bal_input() {
    let tmp = TempDir::new().unwrap();
    let bal = tmp.path().join("tiny.bal");
    let p = gbp_ba::experiments::Scenario::desk(3, 20, 5)
        .problem()
        .unwrap();
    fs::write(&bal, bal_text(&p)).unwrap();
    ok(
        &[
            "solve",
            "--input",
            bal.to_str().unwrap(),
            "--max-iters",
            "5",
        ],
        tmp.path(),
    );
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(s["measurements"], 60);
}

/// BAL text for a problem: observations are centred, points sit in front of
/// cameras looking down −z, so the camera frame is flipped on the way out.
fn bal_text(p: &dataset::ProblemSpec) -> String {
    let k = p.intrinsics;
    let flip = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, -1.0, -1.0));
    let mut s = format!(
        "{} {} {}\n",
        p.keyframes.len(),
        p.landmarks.len(),
        p.measurements.len()
    );
    for m in &p.measurements {
        s += &format!(
            "{} {} {} {}\n",
            m.keyframe,
            m.landmark,
            m.pixel.x - k.cx,
            -(m.pixel.y - k.cy)
        );
    }
    for kf in &p.keyframes {
        let r = flip * kf.pose.rotation_matrix();
        let w = nalgebra::Rotation3::from_matrix(&r).scaled_axis();
        let t = flip * kf.pose.translation;
        for v in [w.x, w.y, w.z, t.x, t.y, t.z, k.fx, 0.0, 0.0] {
            s += &format!("{v}\n");
        }
    }
    for l in &p.landmarks {
        for v in l.position.iter() {
            s += &format!("{v}\n");
        }
    }
    s
}

#[test]
fn experiment_commands_pin_schemas() {
    let tmp = TempDir::new().unwrap();
    let dir = |n: &str| tmp.path().join(n);
    ok(
        &[
            "incremental",
            "--kf",
            "4",
            "--lm",
            "40",
            "--max-iters",
            "30",
            "--out",
            dir("inc").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_golden("incremental.txt", &dir("inc"));
    let rows = fs::read_to_string(dir("inc").join("incremental.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3);
    ok(
        &[
            "sweep",
            "--trials",
            "3",
            "--noise",
            "0,0.05",
            "--max-iters",
            "100",
            "--out",
            dir("sweep").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_golden("sweep.txt", &dir("sweep"));
    let sweep = fs::read_to_string(dir("sweep").join("sweep.csv")).unwrap();
    assert!(sweep
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("0.0,3,3,1.0,3,1.0"));
    ok(
        &[
            "outliers",
            "--outliers",
            "0,0.05",
            "--max-iters",
            "100",
            "--out",
            dir("out").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_golden("outliers.txt", &dir("out"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        gbp_ba(&["solve", "--bogus"], tmp.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        gbp_ba(&["solve", "--damping", "1.0"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        gbp_ba(&["solve", "--input", "x", "--kf", "3"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        gbp_ba(&["solve", "--workers", "0"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    let missing = tmp.path().join("missing.txt");
    assert_eq!(
        gbp_ba(&["solve", "--input", missing.to_str().unwrap()], tmp.path())
            .status
            .code(),
        Some(2)
    );
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "gbp-ba-problem 1\ngarbage\n").unwrap();
    assert_eq!(
        gbp_ba(&["solve", "--input", bad.to_str().unwrap()], tmp.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(gbp_ba(&["--help"], tmp.path()).status.code(), Some(0));
}
