use gbp_ba::camera::project;
use gbp_ba::dataset::{
    from_native_str, inject_outliers, load, parse_bal, perturb, save, synthesize, to_native_string,
    OutlierMode, PerturbParams, SynthParams,
};
use gbp_ba::{solve, FactorGraph, GraphConfig, ScheduleParams};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

/// Two cameras, three points, six observations. Camera 1 uses a different
/// focal length and non-zero distortion terms.
const BAL: &str = "2 3 6
0 0 -12.5 3.25
0 1 40.0 -20.0
0 2 5.0 7.5
1 0 -30.0 1.0
1 1 22.0 -15.5
1 2 -3.0 9.0
0.01
-0.02
0.03
0.1
-0.2
-4.0
500.0
0.0
0.0
-0.05
0.2
0.01
0.5
0.1
-4.5
520.0
0.001
-0.0002
0.1 0.2 0.3
-0.4 0.1 0.2
0.2 -0.3 -0.1
";

/// Independent evaluator of the BAL camera model without distortion:
/// P = R(w)·X + t, p = −P/P_z, pixel = f·p.
fn bal_residuals(text: &str) -> Vec<(f64, f64)> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    let (nc, np, no) = (v[0] as usize, v[1] as usize, v[2] as usize);
    let obs = &v[3..3 + 4 * no];
    let cams = &v[3 + 4 * no..3 + 4 * no + 9 * nc];
    let pts = &v[3 + 4 * no + 9 * nc..3 + 4 * no + 9 * nc + 3 * np];
    obs.chunks(4)
        .map(|o| {
            let c = &cams[9 * o[0] as usize..];
            let p = &pts[3 * o[1] as usize..];
            let r = Rotation3::new(Vector3::new(c[0], c[1], c[2]));
            let q = r * Vector3::new(p[0], p[1], p[2]) + Vector3::new(c[3], c[4], c[5]);
            let (x, y) = (-q.x / q.z * c[6], -q.y / q.z * c[6]);
            (x - o[2], y - o[3])
        })
        .collect()
}

#[test]
fn bal_fixture_imports_with_expected_counts() {
    let p = parse_bal(BAL).unwrap();
    assert_eq!(
        (p.keyframes.len(), p.landmarks.len(), p.measurements.len()),
        (2, 3, 6)
    );
}

#[test]
fn bal_residuals_match_independent_evaluator() {
    let p = parse_bal(BAL).unwrap();
    let k = p.intrinsics;
    let reference = bal_residuals(BAL);
    for (m, (rx, ry)) in p.measurements.iter().zip(reference) {
        let pose = &p.keyframes[m.keyframe].pose;
        let px = project(pose, &p.landmarks[m.landmark].position, &k).unwrap();
        let res = px - m.pixel;
        // Pixels are rescaled to the first camera's focal length and the
        // image y axis points down.
        let s = k.fx / if m.keyframe == 0 { 500.0 } else { 520.0 };
        assert!((res.x - rx * s).abs() < 1e-9, "{} vs {}", res.x, rx * s);
        assert!((res.y + ry * s).abs() < 1e-9, "{} vs {}", res.y, -ry * s);
        assert!((m.sigma - s).abs() < 1e-12);
    }
}

#[test]
fn bal_reexport_is_stable() {
    let p = parse_bal(BAL).unwrap();
    let once = to_native_string(&p);
    let twice = to_native_string(&from_native_str(&once).unwrap());
    assert_eq!(once, twice);
}

#[test]
fn bal_errors() {
    assert!(parse_bal("2 3 6\n0 0 1.0").is_err());
    assert!(parse_bal(&BAL.replacen("1 2 -3.0", "5 2 -3.0", 1)).is_err());
}

#[test]
fn version_mismatch_is_explicit() {
    let text = to_native_string(&parse_bal(BAL).unwrap());
    let bumped = text.replacen("gbp-ba-problem 1", "gbp-ba-problem 99", 1);
    let err = from_native_str(&bumped).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn generated_scene_round_trips_and_resolves_identically() {
    let truth = synthesize(&SynthParams {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let p = perturb(
        &truth,
        &PerturbParams {
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.txt");
    save(&p, &path).unwrap();
    let q = load(&path).unwrap();
    assert_eq!(to_native_string(&p), to_native_string(&q));
    let schedule = ScheduleParams {
        max_iters: 80,
        ..Default::default()
    };
    let run = |p| {
        let mut g = FactorGraph::build(p, &GraphConfig::default()).unwrap();
        solve(&mut g, &schedule)
            .trace
            .iter()
            .map(|r| r.are.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(&p), run(&q));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generators_are_deterministic_and_count_preserving(seed in 0u64..1000, frac in 0.0..0.5f64) {
        let params = SynthParams { n_keyframes: 4, n_landmarks: 30, seed, ..Default::default() };
        let a = synthesize(&params).unwrap();
        prop_assert_eq!(&a, &synthesize(&params).unwrap());
        let pp = PerturbParams { seed, ..Default::default() };
        let b = perturb(&a, &pp).unwrap();
        prop_assert_eq!(&b, &perturb(&a, &pp).unwrap());
        prop_assert_eq!(b.measurements.len(), a.measurements.len());
        for mode in [OutlierMode::Reassign, OutlierMode::Uniform] {
            let (c, summary) = inject_outliers(&b, frac, mode, seed).unwrap();
            prop_assert_eq!(&c, &inject_outliers(&b, frac, mode, seed).unwrap().0);
            prop_assert_eq!(c.measurements.len(), b.measurements.len());
            let labelled = c.outlier_labels().iter().filter(|o| **o).count();
            prop_assert_eq!(labelled, summary.labelled);
            prop_assert_eq!(labelled + summary.skipped, (frac * b.measurements.len() as f64).round() as usize);
        }
        let native = to_native_string(&b);
        prop_assert_eq!(from_native_str(&native).unwrap(), b);
    }
}
