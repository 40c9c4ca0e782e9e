//! Experiment drivers shared by the command-line tool and the acceptance
//! tests: seeded desk-scale scenarios, incremental replay, convergence-basin
//! sweeps and the robust-factor study.

use std::collections::HashMap;

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use crate::dataset::{
    back_project, inject_outliers, perturb, synthesize, DatasetError, KeyframeSpec, LandmarkInit,
    LandmarkSpec, MeasurementSpec, OutlierMode, PerturbParams, ProblemSpec, SynthParams,
    Trajectory,
};
use crate::engine::{iterate, solve, ScheduleParams};
use crate::graph::{FactorGraph, GraphConfig, GraphError};
use crate::oracle::{lm_solve, LmParams};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// A seeded synthetic problem and the way it is initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub synth: SynthParams,
    pub perturb: PerturbParams,
}

impl Scenario {
    /// Desk-scale scene: 7 cm keyframe noise, landmarks back-projected at 1 m,
    /// 0.5 px image noise under a nominal 1 px measurement model.
    pub fn desk(n_keyframes: usize, n_landmarks: usize, seed: u64) -> Self {
        Self {
            synth: SynthParams {
                n_keyframes,
                n_landmarks,
                pixel_noise: 0.5,
                measurement_sigma: Some(1.0),
                seed,
                ..SynthParams::default()
            },
            perturb: PerturbParams {
                keyframe_sigma: 0.07,
                landmark_init: LandmarkInit::FirstObservation { range: 1.0 },
                seed: perturb_seed(seed),
            },
        }
    }

    /// Sideways camera sweep over a wide, shallow scene so landmarks enter and
    /// leave the view; used for incremental replay.
    pub fn sweep(n_keyframes: usize, n_landmarks: usize, seed: u64) -> Self {
        let mut s = Self::desk(n_keyframes, n_landmarks, seed);
        s.synth.trajectory = Trajectory::Line {
            distance: 1.0,
            length: 1.2,
        };
        s.synth.box_half_extents = Vector3::new(0.9, 0.24, 0.16);
        s
    }

    pub fn truth(&self) -> Result<ProblemSpec> {
        Ok(synthesize(&self.synth)?)
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        Ok(perturb(&self.truth()?, &self.perturb)?)
    }
}

/// Seed of the initialisation noise derived from a scene seed.
pub fn perturb_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalParams {
    /// Per-addition schedule; `max_iters` caps each step.
    pub schedule: ScheduleParams,
    pub graph: GraphConfig,
    /// Range along the first ray at which new landmarks are placed.
    pub landmark_range: f64,
    /// Also run a cold GBP solve after every addition.
    pub cold: Option<ColdStart>,
    /// Also run LM from scratch on every prefix.
    pub lm: Option<LmParams>,
}

impl Default for IncrementalParams {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams {
                max_iters: 300,
                ..ScheduleParams::default()
            },
            graph: GraphConfig::default(),
            landmark_range: 1.0,
            cold: None,
            lm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColdStart {
    /// Rebuild the graph from the states at the moment of addition: same
    /// start point, fresh priors and zero-information messages.
    Restart,
    /// Solve the keyframe prefix from a perturbed ground truth.
    Perturbed(PerturbParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalRow {
    pub keyframe: usize,
    pub new_landmarks: usize,
    pub new_measurements: usize,
    pub gbp_iterations: usize,
    pub gbp_converged: bool,
    pub gbp_are: f64,
    pub cold_iterations: Option<usize>,
    pub cold_converged: Option<bool>,
    pub lm_steps: Option<usize>,
    pub lm_converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalReport {
    /// Iterations spent on the first keyframe alone.
    pub initial_iterations: usize,
    /// One row per added keyframe after the first.
    pub rows: Vec<IncrementalRow>,
    pub total_iterations: usize,
}

/// Replays the keyframes of `truth` one at a time. Keyframe 0 is placed at
/// its pose in `truth`; every later keyframe starts at the current estimate
/// of the previous one and new landmarks start on their first ray.
pub fn incremental_replay(
    truth: &ProblemSpec,
    params: &IncrementalParams,
) -> Result<IncrementalReport> {
    if truth.keyframes.is_empty() {
        return Err(ExperimentError::Invalid("problem has no keyframes".into()));
    }
    let perturbed = match &params.cold {
        Some(ColdStart::Perturbed(p)) => Some(perturb(truth, p)?),
        _ => None,
    };
    let mut by_keyframe: Vec<Vec<usize>> = vec![Vec::new(); truth.keyframes.len()];
    for (i, m) in truth.measurements.iter().enumerate() {
        by_keyframe[m.keyframe].push(i);
    }
    let mut g = FactorGraph::new(truth.intrinsics, &params.graph);
    let mut landmark_ids: HashMap<usize, usize> = HashMap::new();
    let mut rows = Vec::new();
    let mut initial_iterations = 0;
    let mut total = 0;
    for k in 0..truth.keyframes.len() {
        let kf = if k == 0 {
            g.add_keyframe(&truth.keyframes[0].pose)
        } else {
            g.add_keyframe_at_latest().expect("graph has keyframes")
        };
        let pose = g.keyframe_pose(kf);
        let mut new_landmarks = 0;
        for &i in &by_keyframe[k] {
            let m = &truth.measurements[i];
            let lm = match landmark_ids.get(&m.landmark) {
                Some(&id) => id,
                None => {
                    let p = back_project(&pose, &m.pixel, &truth.intrinsics, params.landmark_range);
                    let id = g.add_landmark(&p);
                    landmark_ids.insert(m.landmark, id);
                    new_landmarks += 1;
                    id
                }
            };
            g.add_measurement(kf, lm, m.pixel, Matrix2::identity() * (m.sigma * m.sigma))?;
        }
        let snapshot = params.cold.is_some().then(|| graph_to_problem(&g));
        let report = solve(&mut g, &params.schedule);
        total += report.iterations;
        if k == 0 {
            initial_iterations = report.iterations;
            continue;
        }
        let mut row = IncrementalRow {
            keyframe: k,
            new_landmarks,
            new_measurements: by_keyframe[k].len(),
            gbp_iterations: report.iterations,
            gbp_converged: report.converged,
            gbp_are: report.final_are,
            cold_iterations: None,
            cold_converged: None,
            lm_steps: None,
            lm_converged: None,
        };
        if let Some(cold) = &params.cold {
            let start = match cold {
                ColdStart::Restart => snapshot.clone().expect("snapshot taken"),
                ColdStart::Perturbed(_) => perturbed.as_ref().expect("perturbed").prefix(k + 1),
            };
            let mut graph = FactorGraph::build(&start, &params.graph)?;
            let r = solve(&mut graph, &params.schedule);
            row.cold_iterations = Some(r.iterations);
            row.cold_converged = Some(r.converged);
        }
        if let Some(lm) = &params.lm {
            let start = snapshot
                .clone()
                .unwrap_or_else(|| graph_to_problem_prefix(truth, &g, k));
            let graph = FactorGraph::build(&start, &params.graph)?;
            let r = lm_solve(&graph, lm);
            row.lm_steps = Some(r.steps);
            row.lm_converged = Some(r.converged);
        }
        rows.push(row);
    }
    Ok(IncrementalReport {
        initial_iterations,
        rows,
        total_iterations: total,
    })
}

/// Problem whose initial values are the graph's current states.
pub fn graph_to_problem(g: &FactorGraph) -> ProblemSpec {
    let mut p = ProblemSpec::new(g.intrinsics);
    for k in 0..g.keyframes.len() {
        p.keyframes.push(KeyframeSpec {
            id: k,
            pose: g.keyframe_pose(k),
            ground_truth: None,
        });
    }
    for (id, l) in g.landmarks.iter().enumerate() {
        p.landmarks.push(LandmarkSpec {
            id,
            position: l.state,
            ground_truth: None,
        });
    }
    for f in &g.factors {
        p.measurements.push(MeasurementSpec {
            keyframe: f.keyframe,
            landmark: f.landmark,
            pixel: f.z,
            sigma: f.sigma[(0, 0)].sqrt(),
            outlier: false,
        });
    }
    p
}

fn graph_to_problem_prefix(_truth: &ProblemSpec, g: &FactorGraph, _k: usize) -> ProblemSpec {
    graph_to_problem(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepParams {
    /// Keyframe translation noise levels (world units).
    pub noise_levels: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub graph: GraphConfig,
    pub landmark_init: LandmarkInit,
    pub lm: Option<LmParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub noise: f64,
    pub trials: usize,
    pub gbp_successes: usize,
    pub lm_successes: Option<usize>,
}

impl SweepRow {
    pub fn gbp_fraction(&self) -> f64 {
        self.gbp_successes as f64 / self.trials.max(1) as f64
    }

    pub fn lm_fraction(&self) -> Option<f64> {
        self.lm_successes
            .map(|s| s as f64 / self.trials.max(1) as f64)
    }
}

/// Success fraction against keyframe noise. Trial `i` uses the same noise
/// draw at every level, scaled by the level.
pub fn convergence_sweep(truth: &ProblemSpec, params: &SweepParams) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(params.noise_levels.len());
    for &noise in &params.noise_levels {
        let outcomes: Vec<(bool, Option<bool>)> = (0..params.trials)
            .into_par_iter()
            .map(|trial| {
                let start = perturb(
                    truth,
                    &PerturbParams {
                        keyframe_sigma: noise,
                        landmark_init: params.landmark_init,
                        seed: perturb_seed(params.seed.wrapping_add(trial as u64)),
                    },
                )?;
                let graph = FactorGraph::build(&start, &params.graph)?;
                let mut g = graph.clone();
                let gbp = solve(&mut g, &params.schedule).converged;
                let lm = params.lm.as_ref().map(|lm| lm_solve(&graph, lm).converged);
                Ok((gbp, lm))
            })
            .collect::<Result<_>>()?;
        rows.push(SweepRow {
            noise,
            trials: params.trials,
            gbp_successes: outcomes.iter().filter(|o| o.0).count(),
            lm_successes: params
                .lm
                .as_ref()
                .map(|_| outcomes.iter().filter(|o| o.1 == Some(true)).count()),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationRow {
    pub iteration: usize,
    pub precision: f64,
    pub recall: f64,
    pub are: f64,
    pub inlier_are: f64,
}

/// Precision and recall of "in the linear-loss regime" against labels.
/// Precision is 1 when nothing is flagged, recall is 1 without outliers.
pub fn precision_recall(predicted: &[bool], labels: &[bool]) -> (f64, f64) {
    let tp = predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p && **l)
        .count();
    let flagged = predicted.iter().filter(|p| **p).count();
    let actual = labels.iter().filter(|l| **l).count();
    let precision = if flagged == 0 {
        1.0
    } else {
        tp as f64 / flagged as f64
    };
    let recall = if actual == 0 {
        1.0
    } else {
        tp as f64 / actual as f64
    };
    (precision, recall)
}

/// Runs `iterations` GBP iterations recording outlier classification after
/// each one; row 0 is the initial state.
pub fn classification_trace(
    graph: &mut FactorGraph,
    labels: &[bool],
    schedule: &ScheduleParams,
    iterations: usize,
) -> Vec<ClassificationRow> {
    let inliers: Vec<bool> = labels.iter().map(|l| !l).collect();
    let row = |g: &FactorGraph| {
        let (precision, recall) = precision_recall(&g.classify_outliers(g.huber_nsigma), labels);
        ClassificationRow {
            iteration: g.iteration,
            precision,
            recall,
            are: g.average_reprojection_error(),
            inlier_are: g.masked_reprojection_error(&inliers),
        }
    };
    let mut out = vec![row(graph)];
    for _ in 0..iterations {
        iterate(graph, schedule);
        out.push(row(graph));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    GbpHuber,
    Gbp,
    LmHuber,
    Lm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::GbpHuber,
        Variant::Gbp,
        Variant::LmHuber,
        Variant::Lm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::GbpHuber => "gbp_huber",
            Variant::Gbp => "gbp",
            Variant::LmHuber => "lm_huber",
            Variant::Lm => "lm",
        }
    }

    pub fn huber(&self) -> bool {
        matches!(self, Variant::GbpHuber | Variant::LmHuber)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierParams {
    pub fractions: Vec<f64>,
    pub mode: OutlierMode,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub lm: LmParams,
    pub huber_nsigma: f64,
    pub perturb: PerturbParams,
}

impl Default for OutlierParams {
    fn default() -> Self {
        Self {
            fractions: vec![0.0, 0.01, 0.03, 0.05, 0.1],
            mode: OutlierMode::Reassign,
            seed: 0,
            schedule: ScheduleParams::default(),
            lm: LmParams::default(),
            huber_nsigma: crate::graph::DEFAULT_HUBER_NSIGMA,
            perturb: PerturbParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierRow {
    pub fraction: f64,
    pub variant: Variant,
    pub converged: bool,
    pub iterations: usize,
    pub final_are: f64,
    pub inlier_are: f64,
    /// Precision/recall at the end of the run (robust variants only).
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Initialises `truth` from its clean measurements, then corrupts a
/// fraction of them, so bad associations never seed a landmark.
pub fn outlier_problem(
    truth: &ProblemSpec,
    fraction: f64,
    params: &OutlierParams,
) -> Result<ProblemSpec> {
    let initial = perturb(truth, &params.perturb)?;
    Ok(inject_outliers(&initial, fraction, params.mode, params.seed)?.0)
}

/// GBP until the inlier ARE reaches the target; returns (converged, iterations).
pub fn solve_inliers(
    graph: &mut FactorGraph,
    inliers: &[bool],
    schedule: &ScheduleParams,
) -> (bool, usize) {
    if graph.masked_reprojection_error(inliers) < schedule.are_target {
        return (true, 0);
    }
    for i in 1..=schedule.max_iters {
        iterate(graph, schedule);
        if graph.masked_reprojection_error(inliers) < schedule.are_target {
            return (true, i);
        }
    }
    (false, schedule.max_iters)
}

/// Final ARE and classification for each fraction and solver variant.
/// Convergence is judged on the inlier ARE.
pub fn outlier_study(truth: &ProblemSpec, params: &OutlierParams) -> Result<Vec<OutlierRow>> {
    let mut rows = Vec::new();
    for &fraction in &params.fractions {
        let problem = outlier_problem(truth, fraction, params)?;
        let labels = problem.outlier_labels();
        let inliers: Vec<bool> = labels.iter().map(|l| !l).collect();
        for variant in Variant::ALL {
            let config = GraphConfig {
                huber_nsigma: if variant.huber() {
                    params.huber_nsigma
                } else {
                    f64::INFINITY
                },
                ..GraphConfig::default()
            };
            let mut g = FactorGraph::build(&problem, &config)?;
            let (converged, iterations) = match variant {
                Variant::GbpHuber | Variant::Gbp => {
                    solve_inliers(&mut g, &inliers, &params.schedule)
                }
                Variant::LmHuber | Variant::Lm => {
                    let r = lm_solve(&g, &params.lm);
                    for (node, pose) in g.keyframes.iter_mut().zip(&r.keyframes) {
                        node.state = pose.to_vector();
                    }
                    for (node, l) in g.landmarks.iter_mut().zip(&r.landmarks) {
                        node.state = *l;
                    }
                    let ok = g.masked_reprojection_error(&inliers) < params.schedule.are_target;
                    (ok, r.steps)
                }
            };
            let (precision, recall) = if variant.huber() {
                let (p, r) = precision_recall(&g.classify_outliers(params.huber_nsigma), &labels);
                (Some(p), Some(r))
            } else {
                (None, None)
            };
            rows.push(OutlierRow {
                fraction,
                variant,
                converged,
                iterations,
                final_are: g.average_reprojection_error(),
                inlier_are: g.masked_reprojection_error(&inliers),
                precision,
                recall,
            });
        }
    }
    Ok(rows)
}
