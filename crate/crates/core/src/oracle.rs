//! Dense reference solvers used to check the engine: assembly of the full
//! linearised system, exact MAP and marginals by factorisation, and a
//! Levenberg-Marquardt baseline with a landmark Schur complement.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, SVector, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::camera::{
    canonicalize_angle_axis, measurement_jacobian, project, CameraError, Intrinsics, Pose, Vector9,
};
use crate::engine::huber_weight;
use crate::graph::{FactorGraph, VariableKind};

/// Largest system `marginals` will invert densely.
pub const MAX_MARGINAL_DIM: usize = 600;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("system is singular; null-space touches {variables:?}")]
    Singular {
        variables: Vec<(VariableKind, usize)>,
    },
    #[error("system of dimension {dim} exceeds the dense limit {limit}")]
    TooLarge { dim: usize, limit: usize },
}

/// Offsets of every variable in the stacked state: keyframes first, then
/// landmarks, both in id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableIndex {
    pub keyframes: usize,
    pub landmarks: usize,
}

impl VariableIndex {
    pub fn dim(&self) -> usize {
        6 * self.keyframes + 3 * self.landmarks
    }

    pub fn keyframe(&self, k: usize) -> usize {
        6 * k
    }

    pub fn landmark(&self, l: usize) -> usize {
        6 * self.keyframes + 3 * l
    }

    /// Variable owning a stacked coordinate.
    pub fn owner(&self, coord: usize) -> (VariableKind, usize) {
        if coord < 6 * self.keyframes {
            (VariableKind::Keyframe, coord / 6)
        } else {
            (VariableKind::Landmark, (coord - 6 * self.keyframes) / 3)
        }
    }
}

/// The linearised objective as one stacked information-form system.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSystem {
    pub eta: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub index: VariableIndex,
}

/// Per-variable marginal in moment form.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Sums every prior (at the graph's current strength) and every factor's
/// current `(η, Λ)` into the stacked system.
pub fn assemble(graph: &FactorGraph) -> DenseSystem {
    let index = VariableIndex {
        keyframes: graph.keyframes.len(),
        landmarks: graph.landmarks.len(),
    };
    let n = index.dim();
    let mut eta = DVector::zeros(n);
    let mut lambda = DMatrix::zeros(n, n);
    for (k, node) in graph.keyframes.iter().enumerate() {
        let p = node.prior.at(graph.iteration, &graph.weakening);
        let o = index.keyframe(k);
        {
            let mut v = eta.rows_mut(o, 6);
            v += &p.eta;
        }
        {
            let mut v = lambda.view_mut((o, o), (6, 6));
            v += &p.lambda;
        }
    }
    for (l, node) in graph.landmarks.iter().enumerate() {
        let p = node.prior.at(graph.iteration, &graph.weakening);
        let o = index.landmark(l);
        {
            let mut v = eta.rows_mut(o, 3);
            v += &p.eta;
        }
        {
            let mut v = lambda.view_mut((o, o), (3, 3));
            v += &p.lambda;
        }
    }
    for f in &graph.factors {
        let ok = index.keyframe(f.keyframe);
        let ol = index.landmark(f.landmark);
        let blocks = [(ok, 0usize, 6usize), (ol, 6, 3)];
        for &(gi, fi, ni) in &blocks {
            {
                let mut v = eta.rows_mut(gi, ni);
                v += &f.factor.eta.rows(fi, ni);
            }
            for &(gj, fj, nj) in &blocks {
                {
                    let mut v = lambda.view_mut((gi, gj), (ni, nj));
                    v += &f.factor.lambda.view((fi, fj), (ni, nj));
                }
            }
        }
    }
    DenseSystem { eta, lambda, index }
}

/// Variables with a component in the (numerical) null-space of `lambda`.
fn null_space_variables(sys: &DenseSystem) -> Vec<(VariableKind, usize)> {
    let eig = sys.lambda.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut out = Vec::new();
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > 1e-10 * scale {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        for (c, x) in v.iter().enumerate() {
            if x.abs() > 1e-6 {
                let owner = sys.index.owner(c);
                if !out.contains(&owner) {
                    out.push(owner);
                }
            }
        }
    }
    out.sort_by_key(|(kind, id)| (matches!(kind, VariableKind::Landmark), *id));
    out
}

/// Exact MAP of the linear system, `Λ x = η`, by Cholesky.
pub fn map_solve(sys: &DenseSystem) -> Result<DVector<f64>, OracleError> {
    match sys.lambda.clone().cholesky() {
        Some(c) => Ok(c.solve(&sys.eta)),
        None => Err(OracleError::Singular {
            variables: null_space_variables(sys),
        }),
    }
}

/// Exact per-variable marginals (keyframes then landmarks).
pub fn marginals(sys: &DenseSystem) -> Result<Vec<Marginal>, OracleError> {
    let n = sys.index.dim();
    if n > MAX_MARGINAL_DIM {
        return Err(OracleError::TooLarge {
            dim: n,
            limit: MAX_MARGINAL_DIM,
        });
    }
    let chol = sys
        .lambda
        .clone()
        .cholesky()
        .ok_or_else(|| OracleError::Singular {
            variables: null_space_variables(sys),
        })?;
    let mean = chol.solve(&sys.eta);
    let cov = chol.inverse();
    let blocks = (0..sys.index.keyframes)
        .map(|k| (sys.index.keyframe(k), 6))
        .chain((0..sys.index.landmarks).map(|l| (sys.index.landmark(l), 3)));
    Ok(blocks
        .map(|(o, d)| Marginal {
            mean: mean.rows(o, d).into_owned(),
            covariance: cov.view((o, o), (d, d)).into_owned(),
        })
        .collect())
}

/// Central-difference Jacobian of `f` at `x`.
pub fn finite_diff_jacobian<const M: usize, const N: usize>(
    f: impl Fn(&SVector<f64, N>) -> SVector<f64, M>,
    x: &SVector<f64, N>,
    step: f64,
) -> SMatrix<f64, M, N> {
    let mut j = SMatrix::<f64, M, N>::zeros();
    for i in 0..N {
        let mut hi = *x;
        let mut lo = *x;
        hi[i] += step;
        lo[i] -= step;
        j.set_column(i, &((f(&hi) - f(&lo)) / (2.0 * step)));
    }
    j
}

/// Quadratic objective `xᵀΛx − 2ηᵀx` (up to a constant) of the system.
pub fn quadratic_energy(sys: &DenseSystem, x: &DVector<f64>) -> f64 {
    x.dot(&(&sys.lambda * x)) - 2.0 * sys.eta.dot(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub max_steps: usize,
    pub initial_lambda: f64,
    pub max_lambda: f64,
    /// Stop once the ARE falls below this; 0 disables.
    pub are_target: f64,
    /// Stop when an accepted step reduces the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Landmarks are held fixed for this many initial steps.
    pub fix_landmarks_steps: usize,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            max_steps: 100,
            initial_lambda: 1e-4,
            max_lambda: 1e12,
            are_target: 0.0,
            cost_tolerance: 1e-10,
            fix_landmarks_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub keyframes: Vec<Pose>,
    pub landmarks: Vec<Vector3<f64>>,
    /// Row 0 is the initial ARE, then one row per step (accepted or not).
    pub are_trace: Vec<f64>,
    pub cost_trace: Vec<f64>,
    pub steps: usize,
    pub accepted: usize,
    pub converged: bool,
    pub final_are: f64,
}

struct LmState {
    poses: Vec<Vector6<f64>>,
    points: Vec<Vector3<f64>>,
}

fn write_state(graph: &mut FactorGraph, s: &LmState) {
    for (node, p) in graph.keyframes.iter_mut().zip(&s.poses) {
        node.state = *p;
    }
    for (node, l) in graph.landmarks.iter_mut().zip(&s.points) {
        node.state = *l;
    }
}

/// Levenberg-Marquardt on the full objective with Huber reweighting and
/// priors at their final strength. Landmarks are eliminated per 3×3 block and
/// the reduced camera system is solved densely.
pub fn lm_solve(graph: &FactorGraph, params: &LmParams) -> LmReport {
    let mut g = graph.clone();
    let settled = g
        .keyframes
        .iter()
        .map(|n| n.prior.born_at)
        .chain(g.landmarks.iter().map(|n| n.prior.born_at))
        .max()
        .unwrap_or(0)
        + g.weakening.iterations;
    g.iteration = g.iteration.max(settled);
    let mut state = LmState {
        poses: g.keyframes.iter().map(|n| n.state).collect(),
        points: g.landmarks.iter().map(|n| n.state).collect(),
    };
    let eval = g.evaluate();
    let mut cost = eval.energy;
    let mut are = eval.are;
    let mut are_trace = vec![are];
    let mut cost_trace = vec![cost];
    let mut lambda = params.initial_lambda;
    let mut steps = 0;
    let mut accepted = 0;
    let mut converged = params.are_target > 0.0 && are < params.are_target;
    while !converged && steps < params.max_steps && lambda <= params.max_lambda {
        let fix = accepted < params.fix_landmarks_steps;
        let step = lm_step(&g, lambda, fix);
        steps += 1;
        let mut candidate = LmState {
            poses: state
                .poses
                .iter()
                .zip(&step.0)
                .map(|(p, d)| {
                    let mut v = p + d;
                    let w = canonicalize_angle_axis(Vector3::new(v[0], v[1], v[2]));
                    v.fixed_rows_mut::<3>(0).copy_from(&w);
                    v
                })
                .collect(),
            points: state
                .points
                .iter()
                .zip(&step.1)
                .map(|(l, d)| l + d)
                .collect(),
        };
        write_state(&mut g, &candidate);
        let e = g.evaluate();
        if e.energy < cost && e.behind_camera == 0 {
            let reduction = (cost - e.energy) / cost.max(f64::MIN_POSITIVE);
            std::mem::swap(&mut state, &mut candidate);
            cost = e.energy;
            are = e.are;
            accepted += 1;
            lambda = (lambda * 0.1).max(1e-12);
            if params.are_target > 0.0 && are < params.are_target {
                converged = true;
            } else if reduction < params.cost_tolerance && !fix {
                converged = params.are_target == 0.0;
                are_trace.push(are);
                cost_trace.push(cost);
                break;
            }
        } else {
            write_state(&mut g, &state);
            lambda *= 10.0;
        }
        are_trace.push(are);
        cost_trace.push(cost);
    }
    if params.are_target == 0.0 && lambda > params.max_lambda {
        converged = true;
    }
    LmReport {
        keyframes: state.poses.iter().map(Pose::from_vector).collect(),
        landmarks: state.points,
        are_trace,
        cost_trace,
        steps,
        accepted,
        converged,
        final_are: are,
    }
}

/// Solves the damped normal equations at the graph's current states.
fn lm_step(
    g: &FactorGraph,
    lambda: f64,
    fix_landmarks: bool,
) -> (Vec<Vector6<f64>>, Vec<Vector3<f64>>) {
    let nk = g.keyframes.len();
    let nl = g.landmarks.len();
    let mut hcc = vec![Matrix6::<f64>::zeros(); nk];
    let mut gc = vec![Vector6::<f64>::zeros(); nk];
    let mut hll = vec![Matrix3::<f64>::zeros(); nl];
    let mut gl = vec![Vector3::<f64>::zeros(); nl];
    let mut hcl: Vec<SMatrix<f64, 6, 3>> = Vec::with_capacity(g.factors.len());
    for (k, node) in g.keyframes.iter().enumerate() {
        let p = node.prior.at(g.iteration, &g.weakening);
        hcc[k] += p.lambda;
        gc[k] += p.eta - p.lambda * node.state;
    }
    for (l, node) in g.landmarks.iter().enumerate() {
        let p = node.prior.at(g.iteration, &g.weakening);
        hll[l] += p.lambda;
        gl[l] += p.eta - p.lambda * node.state;
    }
    for f in &g.factors {
        let pose = g.keyframe_pose(f.keyframe);
        let l = g.landmarks[f.landmark].state;
        let (j, r) = match linearise(&pose, &l, &g.intrinsics, &f.z) {
            Ok(v) => v,
            Err(_) => {
                hcl.push(SMatrix::zeros());
                continue;
            }
        };
        let w = huber_weight(f.mahalanobis(&r), f.huber_nsigma);
        let info = f.sigma_inv * w;
        let jc = j.fixed_columns::<6>(0);
        let jl = j.fixed_columns::<3>(6);
        hcc[f.keyframe] += jc.transpose() * info * jc;
        gc[f.keyframe] += jc.transpose() * info * r;
        hll[f.landmark] += jl.transpose() * info * jl;
        gl[f.landmark] += jl.transpose() * info * r;
        hcl.push(jc.transpose() * info * jl);
    }
    let damp6 = |m: &mut Matrix6<f64>| {
        for i in 0..6 {
            m[(i, i)] += lambda * m[(i, i)].max(1e-9);
        }
    };
    let damp3 = |m: &mut Matrix3<f64>| {
        for i in 0..3 {
            m[(i, i)] += lambda * m[(i, i)].max(1e-9);
        }
    };
    hcc.iter_mut().for_each(damp6);
    hll.iter_mut().for_each(damp3);

    let n = 6 * nk;
    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for k in 0..nk {
        s.fixed_view_mut::<6, 6>(6 * k, 6 * k).copy_from(&hcc[k]);
        b.fixed_rows_mut::<6>(6 * k).copy_from(&gc[k]);
    }
    let hll_inv: Vec<Option<nalgebra::Cholesky<f64, nalgebra::U3>>> =
        hll.iter().map(|m| m.cholesky()).collect();
    if !fix_landmarks {
        for (l, node) in g.landmarks.iter().enumerate() {
            let Some(c) = &hll_inv[l] else { continue };
            let fs = &node.factors;
            let w: Vec<SMatrix<f64, 3, 6>> =
                fs.iter().map(|&f| c.solve(&hcl[f].transpose())).collect();
            let v = c.solve(&gl[l]);
            for &fa in fs {
                let ka = g.factors[fa].keyframe;
                let mut rows = b.fixed_rows_mut::<6>(6 * ka);
                rows -= hcl[fa] * v;
                for (bi, &fb) in fs.iter().enumerate() {
                    let kb = g.factors[fb].keyframe;
                    let block = hcl[fa] * w[bi];
                    let mut view = s.fixed_view_mut::<6, 6>(6 * ka, 6 * kb);
                    view -= block;
                }
            }
        }
    }
    let dc = match s.clone().cholesky() {
        Some(c) => c.solve(&b),
        None => s.lu().solve(&b).unwrap_or_else(|| DVector::zeros(n)),
    };
    let poses: Vec<Vector6<f64>> = (0..nk)
        .map(|k| dc.fixed_rows::<6>(6 * k).into_owned())
        .collect();
    let points = if fix_landmarks {
        vec![Vector3::zeros(); nl]
    } else {
        g.landmarks
            .iter()
            .enumerate()
            .map(|(l, node)| {
                let Some(c) = &hll_inv[l] else {
                    return Vector3::zeros();
                };
                let mut rhs = gl[l];
                for &f in &node.factors {
                    rhs -= hcl[f].transpose() * poses[g.factors[f].keyframe];
                }
                c.solve(&rhs)
            })
            .collect()
    };
    (poses, points)
}

fn linearise(
    pose: &Pose,
    l: &Vector3<f64>,
    k: &Intrinsics,
    z: &Vector2<f64>,
) -> Result<(SMatrix<f64, 2, 9>, Vector2<f64>), CameraError> {
    let h = project(pose, l, k)?;
    let j = measurement_jacobian(pose, l, k)?;
    Ok((j, z - h))
}

/// Stacked 9-vector state helper for finite differences.
pub fn projection_of_stacked(k: &Intrinsics) -> impl Fn(&Vector9) -> Vector2<f64> + '_ {
    move |x| {
        crate::camera::project_stacked(x, k).unwrap_or_else(|_| Vector2::new(f64::NAN, f64::NAN))
    }
}
