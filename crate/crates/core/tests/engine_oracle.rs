mod common;

use gbp_ba::engine::{iterate, run};
use gbp_ba::experiments::Scenario;
use gbp_ba::oracle::{assemble, lm_solve, map_solve, quadratic_energy, LmParams};
use gbp_ba::{solve, FactorGraph, GraphConfig, ScheduleParams};
use nalgebra::DVector;
use proptest::prelude::*;

fn stacked_means(g: &FactorGraph) -> DVector<f64> {
    DVector::from_iterator(
        6 * g.keyframes.len() + 3 * g.landmarks.len(),
        g.keyframes
            .iter()
            .flat_map(|k| k.belief.mean().unwrap().iter().copied().collect::<Vec<_>>())
            .chain(
                g.landmarks
                    .iter()
                    .flat_map(|l| l.belief.mean().unwrap().iter().copied().collect::<Vec<_>>()),
            ),
    )
}

#[test]
fn gbp_and_lm_reach_comparable_cost() {
    let p = Scenario::desk(10, 100, 5).problem().unwrap();
    let g0 = FactorGraph::build(&p, &GraphConfig::default()).unwrap();
    let lm = lm_solve(&g0, &LmParams::default());
    assert!(lm.converged && lm.final_are < 1.5);
    let mut g = g0.clone();
    let r = solve(
        &mut g,
        &ScheduleParams {
            are_target: 0.0,
            max_iters: 400,
            ..Default::default()
        },
    );
    assert!(r.final_are < 1.5);
    let (lm_cost, gbp_cost) = (*lm.cost_trace.last().unwrap(), g.energy());
    assert!(
        lm.cost_trace.windows(2).all(|w| w[1] <= w[0]),
        "LM cost must not increase"
    );
    assert!(
        (gbp_cost - lm_cost).abs() < 0.05 * lm_cost,
        "gbp {gbp_cost} lm {lm_cost}"
    );
}

#[test]
fn linear_fixed_point_minimises_the_quadratic() {
    let p = common::loopy_problem(42);
    let mut g = FactorGraph::build(&p, &GraphConfig::without_huber()).unwrap();
    let schedule = ScheduleParams {
        max_iters: 500,
        prior_final_scale: 0.1,
        ..ScheduleParams::linear()
    };
    solve(&mut g, &schedule);
    let sys = assemble(&g);
    let x = map_solve(&sys).unwrap();
    let gbp = stacked_means(&g);
    let e_map = quadratic_energy(&sys, &x);
    assert!((quadratic_energy(&sys, &gbp) - e_map).abs() < 1e-6 * e_map.abs().max(1.0));
}

#[test]
fn huber_downweights_reassigned_measurements() {
    let s = Scenario::desk(10, 100, 2);
    let truth = s.truth().unwrap();
    let params = gbp_ba::experiments::OutlierParams {
        seed: 2,
        perturb: s.perturb,
        ..Default::default()
    };
    let p = gbp_ba::experiments::outlier_problem(&truth, 0.1, &params).unwrap();
    let labels = p.outlier_labels();
    let mut g = FactorGraph::build(&p, &GraphConfig::default()).unwrap();
    run(&mut g, &ScheduleParams::default(), 150);
    let mean_weight = |outlier: bool| {
        let w: Vec<f64> = g
            .factors
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == outlier)
            .map(|(f, _)| f.huber_weight)
            .collect();
        w.iter().sum::<f64>() / w.len() as f64
    };
    assert!(mean_weight(true) < 0.5 * mean_weight(false));
}

#[test]
fn late_measurement_leaves_existing_messages_untouched() {
    let p = Scenario::desk(3, 30, 1).problem().unwrap();
    let mut g = FactorGraph::build(&p, &GraphConfig::default()).unwrap();
    run(&mut g, &ScheduleParams::default(), 5);
    let before = g.factors.clone();
    let kf = g.add_keyframe_at_latest().unwrap();
    let z = g.factors[0].z;
    let id = g
        .add_measurement(kf, 0, z, nalgebra::Matrix2::identity())
        .unwrap();
    assert_eq!(&g.factors[..before.len()], &before[..]);
    assert!(g.factors[id].msg_to_keyframe.is_zero() && g.factors[id].msg_to_landmark.is_zero());
    let r = iterate(&mut g, &ScheduleParams::default());
    assert_eq!(r.psd_violations, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Beliefs stay positive definite and finite on random loopy scenes.
    #[test]
    fn beliefs_stay_positive_definite(seed in 0u64..500) {
        let p = common::loopy_problem(seed);
        let mut g = FactorGraph::build(&p, &GraphConfig::default()).unwrap();
        for r in run(&mut g, &ScheduleParams::default(), 40) {
            prop_assert_eq!(r.psd_violations, 0);
            prop_assert!(r.are.is_finite());
        }
        prop_assert!(g.keyframes.iter().all(|k| k.belief.is_psd()));
        prop_assert!(g.landmarks.iter().all(|l| l.belief.is_psd()));
    }
}
