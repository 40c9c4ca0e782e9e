//! Synchronous Gaussian belief propagation, one bulk-synchronous iteration at a
//! time.
//!
//! Each iteration runs four phases separated by barriers:
//!
//! * **A, relinearise**: every factor compares the stacked belief means of its
//!   two variables with its linearisation point and relinearises when they are
//!   more than `beta` apart and the cooldown has elapsed.
//! * **B, factor → variable**: every factor computes both outgoing messages
//!   from the inputs recovered in the previous iteration and damps the
//!   information vector.
//! * **C, belief update**: every variable sums its prior and incoming messages
//!   in ascending factor-id order.
//! * **D, variable → factor**: every factor recovers its inputs as
//!   belief ÷ stored outgoing message.
//!
//! Within a phase every work item only reads state written by earlier phases,
//! so results do not depend on the number of workers.

use nalgebra::allocator::Allocator;
use nalgebra::{DefaultAllocator, Dim, Vector3, U3, U6};
use rayon::prelude::*;

use crate::camera::{canonicalize_angle_axis, Intrinsics, Pose};
use crate::graph::{FactorGraph, KeyframeNode, LandmarkNode, MeasurementFactor, VariableNode};
use crate::info_gaussian::{schur_complement, Gaussian3, Gaussian6, GaussianError, InfoGaussian};

const PAR_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    /// Messages and beliefs are rounded through `f32` after every update.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    /// Relinearisation distance threshold.
    pub beta: f64,
    /// Minimum iterations between two relinearisations of a factor.
    pub relin_cooldown: usize,
    /// Damping applied to factor-to-variable information vectors.
    pub damping: f64,
    /// Iterations after a (re)linearisation during which messages are undamped.
    pub undamped_window: usize,
    pub prior_weaken_iters: usize,
    pub prior_final_scale: f64,
    pub max_iters: usize,
    /// Stop once the average reprojection error drops below this (pixels).
    pub are_target: f64,
    /// Optional early stop on the largest message change.
    pub message_tolerance: Option<f64>,
    pub precision: Precision,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta: 0.01,
            relin_cooldown: 10,
            damping: 0.4,
            undamped_window: 8,
            prior_weaken_iters: 10,
            prior_final_scale: 0.01,
            max_iters: 1000,
            are_target: 1.5,
            message_tolerance: None,
            precision: Precision::Double,
        }
    }
}

impl ScheduleParams {
    /// Pure linear-Gaussian propagation: no relinearisation, stop on message
    /// convergence only.
    pub fn linear() -> Self {
        Self {
            beta: f64::INFINITY,
            are_target: 0.0,
            message_tolerance: Some(1e-8),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(format!("damping {} outside [0, 1)", self.damping));
        }
        if !(self.beta > 0.0) {
            return Err(format!("beta {} must be positive", self.beta));
        }
        if !(self.prior_final_scale > 0.0) {
            return Err("prior_final_scale must be positive".into());
        }
        Ok(())
    }
}

/// Huber weight that rescales Σ_M so a quadratic term reproduces the
/// linear-loss cost: 1 inside the threshold, `2N/M − N²/M²` beyond it.
pub fn huber_weight(mahalanobis: f64, nsigma: f64) -> f64 {
    if mahalanobis <= nsigma {
        1.0
    } else {
        let r = nsigma / mahalanobis;
        2.0 * r - r * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelinOutcome {
    WithinThreshold {
        distance: f64,
    },
    CoolingDown {
        distance: f64,
    },
    Relinearised {
        distance: f64,
    },
    /// The new point projects behind the camera; the old linearisation is kept.
    BehindCamera,
    /// An adjacent belief is singular; the old linearisation is kept.
    FrozenBelief,
}

/// Phase A for one factor.
pub fn relinearize(
    factor: &mut MeasurementFactor,
    keyframe: &KeyframeNode,
    landmark: &LandmarkNode,
    k: &Intrinsics,
    schedule: &ScheduleParams,
    iteration: usize,
) -> RelinOutcome {
    if keyframe.frozen || landmark.frozen {
        return RelinOutcome::FrozenBelief;
    }
    let point = crate::camera::stack_state(&keyframe.state, &landmark.state);
    let distance = (point - factor.lin_point).norm();
    if !(distance > schedule.beta) {
        return RelinOutcome::WithinThreshold { distance };
    }
    if factor.iters_since_relin(iteration) < schedule.relin_cooldown {
        return RelinOutcome::CoolingDown { distance };
    }
    match factor.linearise_at(&point, k) {
        Ok(()) => {
            factor.last_linearised = iteration;
            factor.relinearisations += 1;
            RelinOutcome::Relinearised { distance }
        }
        Err(_) => RelinOutcome::BehindCamera,
    }
}

/// Undamped message to the keyframe: condition on the landmark input, then
/// marginalise the landmark out.
pub fn raw_keyframe_message(factor: &MeasurementFactor) -> Result<Gaussian6, GaussianError> {
    let f = &factor.factor;
    let eta_b = f.eta.fixed_rows::<3>(6) + factor.from_landmark.eta;
    let lambda_bb = f.lambda.fixed_view::<3, 3>(6, 6) + factor.from_landmark.lambda;
    schur_complement(
        &f.eta.fixed_rows::<6>(0).into_owned(),
        &eta_b,
        &f.lambda.fixed_view::<6, 6>(0, 0).into_owned(),
        &f.lambda.fixed_view::<6, 3>(0, 6).into_owned(),
        &lambda_bb,
    )
}

/// Undamped message to the landmark.
pub fn raw_landmark_message(factor: &MeasurementFactor) -> Result<Gaussian3, GaussianError> {
    let f = &factor.factor;
    let eta_b = f.eta.fixed_rows::<6>(0) + factor.from_keyframe.eta;
    let lambda_bb = f.lambda.fixed_view::<6, 6>(0, 0) + factor.from_keyframe.lambda;
    schur_complement(
        &f.eta.fixed_rows::<3>(6).into_owned(),
        &eta_b,
        &f.lambda.fixed_view::<3, 3>(6, 6).into_owned(),
        &f.lambda.fixed_view::<3, 6>(6, 0).into_owned(),
        &lambda_bb,
    )
}

/// Damping factor in effect for a factor's messages at `iteration`.
pub fn effective_damping(
    factor: &MeasurementFactor,
    schedule: &ScheduleParams,
    iteration: usize,
) -> f64 {
    if factor.iters_since_relin(iteration) < schedule.undamped_window {
        0.0
    } else {
        schedule.damping
    }
}

/// `η ← (1−d)·η_new + d·η_prev`; Λ is not damped.
pub fn damp<D: Dim>(new: InfoGaussian<D>, previous: &InfoGaussian<D>, d: f64) -> InfoGaussian<D>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    if d == 0.0 {
        return new;
    }
    InfoGaussian {
        eta: new.eta * (1.0 - d) + &previous.eta * d,
        lambda: new.lambda,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MessageOutcome {
    pub damping: f64,
    /// Number of outgoing messages (0–2) left unchanged because of a singular
    /// conditioning block.
    pub singular: u8,
    pub delta: f64,
}

fn max_abs_diff<D: Dim>(a: &InfoGaussian<D>, b: &InfoGaussian<D>) -> f64
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    let e = (&a.eta - &b.eta).amax();
    let l = (&a.lambda - &b.lambda).amax();
    e.max(l)
}

/// Phase B for one factor: computes, damps and stores both messages.
pub fn factor_to_variable_messages(
    factor: &mut MeasurementFactor,
    schedule: &ScheduleParams,
    iteration: usize,
) -> MessageOutcome {
    let d = effective_damping(factor, schedule, iteration);
    let mut out = MessageOutcome {
        damping: d,
        ..Default::default()
    };
    let to_kf = raw_keyframe_message(factor);
    let to_lm = raw_landmark_message(factor);
    match to_kf {
        Ok(m) => {
            let mut m = damp(m, &factor.msg_to_keyframe, d);
            if schedule.precision == Precision::Single {
                m.round_to_single();
            }
            out.delta = out.delta.max(max_abs_diff(&m, &factor.msg_to_keyframe));
            factor.msg_to_keyframe = m;
        }
        Err(_) => out.singular += 1,
    }
    match to_lm {
        Ok(m) => {
            let mut m = damp(m, &factor.msg_to_landmark, d);
            if schedule.precision == Precision::Single {
                m.round_to_single();
            }
            out.delta = out.delta.max(max_abs_diff(&m, &factor.msg_to_landmark));
            factor.msg_to_landmark = m;
        }
        Err(_) => out.singular += 1,
    }
    out
}

/// Phase C for one variable: prior plus incoming messages in the given
/// (ascending factor-id) order. Returns false when the belief is singular and
/// the state was left unchanged.
pub fn update_belief<'a, D: Dim + 'a>(
    node: &mut VariableNode<D>,
    incoming: impl Iterator<Item = &'a InfoGaussian<D>>,
    prior: InfoGaussian<D>,
) -> bool
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    let mut belief = prior;
    for m in incoming {
        belief.eta += &m.eta;
        belief.lambda += &m.lambda;
    }
    node.belief = belief;
    match node.belief.mean() {
        Ok(mean) => {
            node.state = mean;
            node.frozen = false;
            true
        }
        Err(_) => {
            node.frozen = true;
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationReport {
    /// Index of the iteration that was executed.
    pub iteration: usize,
    pub relinearised: Vec<usize>,
    pub relin_distances: Vec<f64>,
    pub cooling_down: usize,
    pub relin_behind_camera: usize,
    pub relin_frozen: usize,
    pub singular_messages: usize,
    pub damped_factors: usize,
    pub undamped_factors: usize,
    pub frozen_beliefs: usize,
    pub psd_violations: usize,
    pub max_message_delta: f64,
    /// Prior strength multiplier applied to variables created at iteration 0.
    pub prior_scale: f64,
    pub are: f64,
    pub energy: f64,
    pub behind_camera: usize,
}

fn sync_schedule(graph: &mut FactorGraph, schedule: &ScheduleParams) {
    graph.weakening.iterations = schedule.prior_weaken_iters;
    graph.weakening.final_scale = schedule.prior_final_scale;
}

/// Runs one full iteration (phases A–D) and advances the iteration counter.
pub fn iterate(graph: &mut FactorGraph, schedule: &ScheduleParams) -> IterationReport {
    sync_schedule(graph, schedule);
    let t = graph.iteration;
    let weakening = graph.weakening;
    let k = graph.intrinsics;
    let FactorGraph {
        keyframes,
        landmarks,
        factors,
        ..
    } = graph;
    let mut report = IterationReport {
        iteration: t,
        prior_scale: weakening.scale(t),
        ..Default::default()
    };

    // A
    let relin: Vec<RelinOutcome> = factors
        .par_iter_mut()
        .with_min_len(PAR_CHUNK)
        .map(|f| {
            let kf = &keyframes[f.keyframe];
            let lm = &landmarks[f.landmark];
            relinearize(f, kf, lm, &k, schedule, t)
        })
        .collect();
    for (id, outcome) in relin.iter().enumerate() {
        match outcome {
            RelinOutcome::Relinearised { distance } => {
                report.relinearised.push(id);
                report.relin_distances.push(*distance);
            }
            RelinOutcome::CoolingDown { .. } => report.cooling_down += 1,
            RelinOutcome::BehindCamera => report.relin_behind_camera += 1,
            RelinOutcome::FrozenBelief => report.relin_frozen += 1,
            RelinOutcome::WithinThreshold { .. } => {}
        }
    }

    // B
    let msgs: Vec<MessageOutcome> = factors
        .par_iter_mut()
        .with_min_len(PAR_CHUNK)
        .map(|f| factor_to_variable_messages(f, schedule, t))
        .collect();
    for m in &msgs {
        report.singular_messages += m.singular as usize;
        if m.damping > 0.0 {
            report.damped_factors += 1;
        } else {
            report.undamped_factors += 1;
        }
        report.max_message_delta = report.max_message_delta.max(m.delta);
    }

    // C
    let factors_ro: &Vec<MeasurementFactor> = factors;
    let single = schedule.precision == Precision::Single;
    let kf_ok: Vec<bool> = keyframes
        .par_iter_mut()
        .map(|node| {
            let prior = node.prior.at(t, &weakening);
            let ids = std::mem::take(&mut node.factors);
            let incoming = ids.iter().map(|&f| &factors_ro[f].msg_to_keyframe);
            let ok = update_belief::<U6>(node, incoming, prior);
            node.factors = ids;
            if single {
                node.belief.round_to_single();
            }
            let w =
                canonicalize_angle_axis(Vector3::new(node.state[0], node.state[1], node.state[2]));
            node.state.fixed_rows_mut::<3>(0).copy_from(&w);
            ok || node.belief.is_psd()
        })
        .collect();
    let lm_ok: Vec<bool> = landmarks
        .par_iter_mut()
        .with_min_len(PAR_CHUNK)
        .map(|node| {
            let prior = node.prior.at(t, &weakening);
            let ids = std::mem::take(&mut node.factors);
            let incoming = ids.iter().map(|&f| &factors_ro[f].msg_to_landmark);
            let ok = update_belief::<U3>(node, incoming, prior);
            node.factors = ids;
            if single {
                node.belief.round_to_single();
            }
            ok || node.belief.is_psd()
        })
        .collect();
    report.frozen_beliefs = keyframes.iter().filter(|n| n.frozen).count()
        + landmarks.iter().filter(|n| n.frozen).count();
    report.psd_violations = kf_ok.iter().chain(&lm_ok).filter(|ok| !**ok).count();

    // D
    factors
        .par_iter_mut()
        .with_min_len(PAR_CHUNK)
        .for_each(|f| {
            let kf = &keyframes[f.keyframe].belief;
            let lm = &landmarks[f.landmark].belief;
            f.from_keyframe = InfoGaussian {
                eta: kf.eta - f.msg_to_keyframe.eta,
                lambda: kf.lambda - f.msg_to_keyframe.lambda,
            };
            f.from_landmark = InfoGaussian {
                eta: lm.eta - f.msg_to_landmark.eta,
                lambda: lm.lambda - f.msg_to_landmark.lambda,
            };
        });

    graph.iteration += 1;
    let eval = graph.evaluate();
    report.are = eval.are;
    report.energy = eval.energy;
    report.behind_camera = eval.behind_camera;
    report
}

/// Runs `n` iterations.
pub fn run(graph: &mut FactorGraph, schedule: &ScheduleParams, n: usize) -> Vec<IterationReport> {
    (0..n).map(|_| iterate(graph, schedule)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub are: f64,
    pub energy: f64,
    pub relinearised: usize,
    pub max_message_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    AreTarget,
    MessageTolerance,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Row 0 is the initial state, row i the state after i iterations.
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub final_are: f64,
    pub keyframes: Vec<Pose>,
    pub landmarks: Vec<Vector3<f64>>,
    pub singular_messages: usize,
    pub behind_camera_relins: usize,
    pub psd_violations: usize,
}

/// Iterates until the ARE target, the optional message tolerance, or
/// `max_iters`. Non-convergence is reported, not an error.
pub fn solve(graph: &mut FactorGraph, schedule: &ScheduleParams) -> SolveReport {
    sync_schedule(graph, schedule);
    let eval = graph.evaluate();
    let mut trace = vec![TraceRow {
        iteration: 0,
        are: eval.are,
        energy: eval.energy,
        relinearised: 0,
        max_message_delta: 0.0,
    }];
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;
    let mut singular = 0;
    let mut behind = 0;
    let mut psd = 0;
    if eval.are < schedule.are_target {
        stop = StopReason::AreTarget;
    } else {
        while iterations < schedule.max_iters {
            let r = iterate(graph, schedule);
            iterations += 1;
            singular += r.singular_messages;
            behind += r.relin_behind_camera;
            psd += r.psd_violations;
            trace.push(TraceRow {
                iteration: iterations,
                are: r.are,
                energy: r.energy,
                relinearised: r.relinearised.len(),
                max_message_delta: r.max_message_delta,
            });
            if r.are < schedule.are_target {
                stop = StopReason::AreTarget;
                break;
            }
            if let Some(tol) = schedule.message_tolerance {
                let priors_settled = r.iteration >= schedule.prior_weaken_iters;
                if r.singular_messages == 0 && priors_settled && r.max_message_delta < tol {
                    stop = StopReason::MessageTolerance;
                    break;
                }
            }
        }
    }
    SolveReport {
        final_are: trace.last().map(|r| r.are).unwrap_or(0.0),
        trace,
        iterations,
        converged: stop != StopReason::MaxIters,
        stop,
        keyframes: (0..graph.keyframes.len())
            .map(|i| graph.keyframe_pose(i))
            .collect(),
        landmarks: graph.landmarks.iter().map(|l| l.state).collect(),
        singular_messages: singular,
        behind_camera_relins: behind,
        psd_violations: psd,
    }
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}
