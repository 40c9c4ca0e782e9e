//! The bundle-adjustment factor graph.
//!
//! Keyframes (6-dim) and landmarks (3-dim) each carry one prior factor.
//! Measurement factors join exactly one keyframe and one landmark. Factor ids
//! are their index in [`FactorGraph::factors`]; adjacency lists are kept in
//! ascending factor-id order so belief reductions are deterministic.

use std::collections::HashSet;

use nalgebra::allocator::Allocator;
use nalgebra::{
    DefaultAllocator, Dim, Matrix2, OMatrix, OVector, Vector2, Vector3, Vector6, U3, U6,
};
use thiserror::Error;

use crate::camera::{
    self, measurement_jacobian, project, CameraError, Intrinsics, Matrix2x9, Pose, Vector9,
};
use crate::dataset::ProblemSpec;
use crate::engine::huber_weight;
use crate::info_gaussian::{Gaussian3, Gaussian6, Gaussian9, InfoGaussian};

pub const DEFAULT_HUBER_NSIGMA: f64 = 2.0;
/// Pixel error charged to a measurement whose landmark is behind the camera.
pub const ARE_SENTINEL: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("measurement {index} references missing keyframe {keyframe} or landmark {landmark}")]
    DanglingMeasurement {
        index: usize,
        keyframe: usize,
        landmark: usize,
    },
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(usize),
    #[error("unknown landmark {0}")]
    UnknownLandmark(usize),
    #[error("measurement noise must be a positive definite 2x2 covariance")]
    InvalidNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableKind {
    Keyframe,
    Landmark,
}

/// Geometric schedule that weakens priors from their initial strength to
/// `final_scale` of it over `iterations` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorWeakening {
    pub iterations: usize,
    pub final_scale: f64,
}

impl Default for PriorWeakening {
    fn default() -> Self {
        Self {
            iterations: 10,
            final_scale: 0.01,
        }
    }
}

impl PriorWeakening {
    /// Strength multiplier after `age` iterations.
    pub fn scale(&self, age: usize) -> f64 {
        if self.iterations == 0 {
            return self.final_scale;
        }
        let progress = age.min(self.iterations) as f64 / self.iterations as f64;
        self.final_scale.powf(progress)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior<D: Dim>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    pub mean: OVector<f64, D>,
    /// Diagonal information at full strength.
    pub initial_lambda: OMatrix<f64, D, D>,
    /// Graph iteration at which the weakening schedule starts.
    pub born_at: usize,
    /// Set when no measurement informed the strength.
    pub fallback: bool,
}

impl<D: Dim> Prior<D>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    pub fn scale_at(&self, iteration: usize, weakening: &PriorWeakening) -> f64 {
        weakening.scale(iteration.saturating_sub(self.born_at))
    }

    /// Prior message in effect at `iteration`; the mean is the same at every strength.
    pub fn at(&self, iteration: usize, weakening: &PriorWeakening) -> InfoGaussian<D> {
        let s = self.scale_at(iteration, weakening);
        let lambda = &self.initial_lambda * s;
        let eta = &lambda * &self.mean;
        InfoGaussian { eta, lambda }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableNode<D: Dim>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    pub id: usize,
    pub kind: VariableKind,
    /// Current estimate, the belief mean whenever the belief is invertible.
    pub state: OVector<f64, D>,
    pub belief: InfoGaussian<D>,
    pub prior: Prior<D>,
    /// Adjacent measurement factors, ascending.
    pub factors: Vec<usize>,
    pub created_at: usize,
    /// Belief was singular at the last update, state left unchanged.
    pub frozen: bool,
}

pub type KeyframeNode = VariableNode<U6>;
pub type LandmarkNode = VariableNode<U3>;

impl<D: Dim> VariableNode<D>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    fn new(id: usize, kind: VariableKind, state: OVector<f64, D>, created_at: usize) -> Self {
        let (dim, _) = state.shape_generic();
        let mut initial_lambda = OMatrix::zeros_generic(dim, dim);
        initial_lambda.fill_diagonal(1.0);
        let prior = Prior {
            mean: state.clone(),
            initial_lambda,
            born_at: created_at,
            fallback: true,
        };
        Self {
            id,
            kind,
            belief: InfoGaussian::zeros_generic(dim),
            state,
            prior,
            factors: Vec::new(),
            created_at,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.state.nrows()
    }
}

/// Pairwise reprojection factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFactor {
    pub id: usize,
    pub keyframe: usize,
    pub landmark: usize,
    pub z: Vector2<f64>,
    /// Measurement noise covariance Σ_M.
    pub sigma: Matrix2<f64>,
    pub sigma_inv: Matrix2<f64>,
    /// Huber threshold N_σ on the Mahalanobis distance; infinite disables it.
    pub huber_nsigma: f64,
    pub lin_point: Vector9,
    pub jacobian: Matrix2x9,
    /// Huber weight frozen at the linearisation point.
    pub huber_weight: f64,
    pub factor: Gaussian9,
    pub msg_to_keyframe: Gaussian6,
    pub msg_to_landmark: Gaussian3,
    /// Variable-to-factor inputs, recovered as belief ÷ stored outgoing message.
    pub from_keyframe: Gaussian6,
    pub from_landmark: Gaussian3,
    /// Graph iteration of the last (re)linearisation.
    pub last_linearised: usize,
    pub relinearisations: usize,
    /// Linearisation failed (behind camera); the factor holds its previous value.
    pub stale: bool,
    pub duplicate: bool,
}

impl MeasurementFactor {
    pub fn iters_since_relin(&self, iteration: usize) -> usize {
        iteration.saturating_sub(self.last_linearised)
    }

    pub fn mahalanobis(&self, residual: &Vector2<f64>) -> f64 {
        residual.dot(&(self.sigma_inv * residual)).max(0.0).sqrt()
    }

    /// Recomputes `(η, Λ)` at `point`. On failure nothing changes.
    pub fn linearise_at(&mut self, point: &Vector9, k: &Intrinsics) -> Result<(), CameraError> {
        let (pose, l) = camera::split_state(point);
        let h0 = project(&pose, &l, k)?;
        let j = measurement_jacobian(&pose, &l, k)?;
        let r = self.z - h0;
        let w = huber_weight(self.mahalanobis(&r), self.huber_nsigma);
        let info = self.sigma_inv * w;
        let jt_w = j.transpose() * info;
        let mut factor = Gaussian9 {
            eta: jt_w * (j * point + r),
            lambda: jt_w * j,
        };
        factor.symmetrize();
        self.factor = factor;
        self.jacobian = j;
        self.lin_point = *point;
        self.huber_weight = w;
        self.stale = false;
        Ok(())
    }

    /// Unweighted `Jᵀ Σ_M⁻¹ J` at the linearisation point.
    pub fn measurement_information(&self) -> nalgebra::SMatrix<f64, 9, 9> {
        self.jacobian.transpose() * self.sigma_inv * self.jacobian
    }

    /// Huber-modified squared Mahalanobis cost of a residual.
    pub fn robust_cost(&self, residual: &Vector2<f64>) -> f64 {
        let m = self.mahalanobis(residual);
        let n = self.huber_nsigma;
        if m <= n {
            m * m
        } else {
            2.0 * n * m - n * n
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub huber_nsigma: f64,
    pub weakening: PriorWeakening,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            huber_nsigma: DEFAULT_HUBER_NSIGMA,
            weakening: PriorWeakening::default(),
        }
    }
}

impl GraphConfig {
    pub fn without_huber() -> Self {
        Self {
            huber_nsigma: f64::INFINITY,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub fallback_priors: Vec<(VariableKind, usize)>,
    pub duplicate_measurements: usize,
    /// Factors that could not be linearised at their initial point.
    pub stale_at_build: usize,
}

/// Read-only evaluation of the graph at the current states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub energy: f64,
    pub are: f64,
    /// Measurements whose landmark is behind the camera.
    pub behind_camera: usize,
}

#[derive(Debug, Clone)]
pub struct FactorGraph {
    pub intrinsics: Intrinsics,
    pub keyframes: Vec<KeyframeNode>,
    pub landmarks: Vec<LandmarkNode>,
    pub factors: Vec<MeasurementFactor>,
    /// Number of completed iterations.
    pub iteration: usize,
    pub weakening: PriorWeakening,
    pub huber_nsigma: f64,
    pub diagnostics: Diagnostics,
    pairs: HashSet<(usize, usize)>,
}

impl FactorGraph {
    pub fn new(intrinsics: Intrinsics, config: &GraphConfig) -> Self {
        Self {
            intrinsics,
            keyframes: Vec::new(),
            landmarks: Vec::new(),
            factors: Vec::new(),
            iteration: 0,
            weakening: config.weakening,
            huber_nsigma: config.huber_nsigma,
            diagnostics: Diagnostics::default(),
            pairs: HashSet::new(),
        }
    }

    /// Builds the graph from a problem: one prior per variable, one factor per
    /// measurement, everything linearised at the initial states and all
    /// messages zero-information.
    pub fn build(problem: &ProblemSpec, config: &GraphConfig) -> Result<Self, GraphError> {
        let mut g = Self::new(problem.intrinsics, config);
        for kf in &problem.keyframes {
            g.push_keyframe(&kf.pose);
        }
        for lm in &problem.landmarks {
            g.push_landmark(&lm.position);
        }
        for (index, m) in problem.measurements.iter().enumerate() {
            if m.keyframe >= g.keyframes.len() || m.landmark >= g.landmarks.len() {
                return Err(GraphError::DanglingMeasurement {
                    index,
                    keyframe: m.keyframe,
                    landmark: m.landmark,
                });
            }
            let sigma = Matrix2::identity() * (m.sigma * m.sigma);
            g.push_factor(m.keyframe, m.landmark, m.pixel, sigma)?;
        }
        g.diagnostics.stale_at_build = g.factors.iter().filter(|f| f.stale).count();
        g.generate_priors();
        Ok(g)
    }

    pub fn num_variables(&self) -> usize {
        self.keyframes.len() + self.landmarks.len()
    }

    /// Priors plus measurement factors.
    pub fn num_factor_nodes(&self) -> usize {
        self.num_variables() + self.factors.len()
    }

    fn push_keyframe(&mut self, pose: &Pose) -> usize {
        let id = self.keyframes.len();
        self.keyframes.push(VariableNode::new(
            id,
            VariableKind::Keyframe,
            pose.to_vector(),
            self.iteration,
        ));
        let node = self.keyframes.last_mut().unwrap();
        node.belief = node.prior.at(self.iteration, &self.weakening);
        id
    }

    fn push_landmark(&mut self, position: &Vector3<f64>) -> usize {
        let id = self.landmarks.len();
        self.landmarks.push(VariableNode::new(
            id,
            VariableKind::Landmark,
            *position,
            self.iteration,
        ));
        let node = self.landmarks.last_mut().unwrap();
        node.belief = node.prior.at(self.iteration, &self.weakening);
        id
    }

    fn push_factor(
        &mut self,
        kf: usize,
        lm: usize,
        z: Vector2<f64>,
        sigma: Matrix2<f64>,
    ) -> Result<usize, GraphError> {
        let sigma_inv = sigma
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(GraphError::InvalidNoise)?;
        let id = self.factors.len();
        let duplicate = !self.pairs.insert((kf, lm));
        if duplicate {
            self.diagnostics.duplicate_measurements += 1;
        }
        let point = camera::stack_state(&self.keyframes[kf].state, &self.landmarks[lm].state);
        let mut factor = MeasurementFactor {
            id,
            keyframe: kf,
            landmark: lm,
            z,
            sigma,
            sigma_inv,
            huber_nsigma: self.huber_nsigma,
            lin_point: point,
            jacobian: Matrix2x9::zeros(),
            huber_weight: 1.0,
            factor: Gaussian9::zero(),
            msg_to_keyframe: Gaussian6::zero(),
            msg_to_landmark: Gaussian3::zero(),
            from_keyframe: Gaussian6::zero(),
            from_landmark: Gaussian3::zero(),
            last_linearised: self.iteration,
            relinearisations: 0,
            stale: false,
            duplicate,
        };
        if factor.linearise_at(&point, &self.intrinsics).is_err() {
            factor.stale = true;
        }
        self.factors.push(factor);
        self.keyframes[kf].factors.push(id);
        self.landmarks[lm].factors.push(id);
        Ok(id)
    }

    /// Regenerates every prior from the current linearisation, centred on the
    /// current states and starting its weakening schedule now.
    pub fn generate_priors(&mut self) {
        for k in 0..self.keyframes.len() {
            self.refresh_keyframe_prior(k);
        }
        for l in 0..self.landmarks.len() {
            self.refresh_landmark_prior(l);
        }
    }

    /// Diagonal of the summed measurement information blocks of a keyframe.
    pub fn keyframe_prior_strength(&self, k: usize) -> Option<Vector6<f64>> {
        let node = &self.keyframes[k];
        let mut diag = Vector6::zeros();
        let mut any = false;
        for &f in &node.factors {
            let f = &self.factors[f];
            if f.stale {
                continue;
            }
            let info = f.measurement_information();
            for i in 0..6 {
                diag[i] += info[(i, i)];
            }
            any = true;
        }
        any.then_some(diag)
    }

    pub fn landmark_prior_strength(&self, l: usize) -> Option<Vector3<f64>> {
        let node = &self.landmarks[l];
        let mut diag = Vector3::zeros();
        let mut any = false;
        for &f in &node.factors {
            let f = &self.factors[f];
            if f.stale {
                continue;
            }
            let info = f.measurement_information();
            for i in 0..3 {
                diag[i] += info[(6 + i, 6 + i)];
            }
            any = true;
        }
        any.then_some(diag)
    }

    fn refresh_keyframe_prior(&mut self, k: usize) {
        let strength = self.keyframe_prior_strength(k);
        let iteration = self.iteration;
        let node = &mut self.keyframes[k];
        set_prior(node, strength.as_ref().map(|d| d.as_slice()), iteration);
        let entry = (VariableKind::Keyframe, k);
        let list = &mut self.diagnostics.fallback_priors;
        list.retain(|e| *e != entry);
        if node.prior.fallback {
            list.push(entry);
        }
        node.belief = node.prior.at(iteration, &self.weakening);
    }

    fn refresh_landmark_prior(&mut self, l: usize) {
        let strength = self.landmark_prior_strength(l);
        let iteration = self.iteration;
        let node = &mut self.landmarks[l];
        set_prior(node, strength.as_ref().map(|d| d.as_slice()), iteration);
        let entry = (VariableKind::Landmark, l);
        let list = &mut self.diagnostics.fallback_priors;
        list.retain(|e| *e != entry);
        if node.prior.fallback {
            list.push(entry);
        }
        node.belief = node.prior.at(iteration, &self.weakening);
    }

    /// Adds a keyframe; its prior is generated once measurements attach to it.
    pub fn add_keyframe(&mut self, pose: &Pose) -> usize {
        self.push_keyframe(pose)
    }

    /// Adds a keyframe at the pose estimate of the most recent keyframe.
    pub fn add_keyframe_at_latest(&mut self) -> Option<usize> {
        let latest = self.keyframes.last()?.state;
        Some(self.push_keyframe(&Pose::from_vector(&latest)))
    }

    pub fn add_landmark(&mut self, position: &Vector3<f64>) -> usize {
        self.push_landmark(position)
    }

    /// Adds a measurement factor with zero-information messages. Variables
    /// created during the current iteration get their prior regenerated;
    /// everything else is left untouched.
    pub fn add_measurement(
        &mut self,
        keyframe: usize,
        landmark: usize,
        z: Vector2<f64>,
        sigma: Matrix2<f64>,
    ) -> Result<usize, GraphError> {
        if keyframe >= self.keyframes.len() {
            return Err(GraphError::UnknownKeyframe(keyframe));
        }
        if landmark >= self.landmarks.len() {
            return Err(GraphError::UnknownLandmark(landmark));
        }
        let id = self.push_factor(keyframe, landmark, z, sigma)?;
        if self.keyframes[keyframe].created_at == self.iteration {
            self.refresh_keyframe_prior(keyframe);
        }
        if self.landmarks[landmark].created_at == self.iteration {
            self.refresh_landmark_prior(landmark);
        }
        Ok(id)
    }

    pub fn keyframe_pose(&self, k: usize) -> Pose {
        Pose::from_vector(&self.keyframes[k].state)
    }

    pub fn stacked_state(&self, factor: &MeasurementFactor) -> Vector9 {
        camera::stack_state(
            &self.keyframes[factor.keyframe].state,
            &self.landmarks[factor.landmark].state,
        )
    }

    /// Residual `z − h` at the current states.
    pub fn residual(&self, factor: &MeasurementFactor) -> Result<Vector2<f64>, CameraError> {
        let pose = self.keyframe_pose(factor.keyframe);
        project(
            &pose,
            &self.landmarks[factor.landmark].state,
            &self.intrinsics,
        )
        .map(|h| factor.z - h)
    }

    /// Objective at the current states: prior Mahalanobis terms at the current
    /// prior strength plus Huber-modified measurement terms.
    pub fn evaluate(&self) -> Evaluation {
        let mut energy = 0.0;
        for node in &self.keyframes {
            energy += prior_term(node, self.iteration, &self.weakening);
        }
        for node in &self.landmarks {
            energy += prior_term(node, self.iteration, &self.weakening);
        }
        let mut behind = 0;
        let mut err_sum = 0.0;
        for f in &self.factors {
            match self.residual(f) {
                Ok(r) => {
                    energy += f.robust_cost(&r);
                    err_sum += r.norm();
                }
                Err(_) => {
                    behind += 1;
                    err_sum += ARE_SENTINEL;
                    let (pose, l) = camera::split_state(&f.lin_point);
                    if let Ok(h) = project(&pose, &l, &self.intrinsics) {
                        energy += f.robust_cost(&(f.z - h));
                    }
                }
            }
        }
        let are = if self.factors.is_empty() {
            0.0
        } else {
            err_sum / self.factors.len() as f64
        };
        Evaluation {
            energy,
            are,
            behind_camera: behind,
        }
    }

    pub fn energy(&self) -> f64 {
        self.evaluate().energy
    }

    /// Mean pixel reprojection error over all measurements; 0 with none.
    pub fn average_reprojection_error(&self) -> f64 {
        self.evaluate().are
    }

    /// Mean pixel error over the measurements selected by `mask`.
    pub fn masked_reprojection_error(&self, mask: &[bool]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (f, _) in self.factors.iter().zip(mask).filter(|(_, m)| **m) {
            sum += self.residual(f).map(|r| r.norm()).unwrap_or(ARE_SENTINEL);
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Measurements in the linear-loss regime at the current states.
    pub fn classify_outliers(&self, nsigma: f64) -> Vec<bool> {
        self.factors
            .iter()
            .map(|f| match self.residual(f) {
                Ok(r) => f.mahalanobis(&r) > nsigma,
                Err(_) => true,
            })
            .collect()
    }

    /// Objective of the linearised model (factors frozen at their current
    /// `(η, Λ)`) evaluated at the current states.
    pub fn linearised_energy(&self) -> f64 {
        let mut energy = 0.0;
        for node in &self.keyframes {
            energy += prior_term(node, self.iteration, &self.weakening);
        }
        for node in &self.landmarks {
            energy += prior_term(node, self.iteration, &self.weakening);
        }
        for f in &self.factors {
            if f.stale {
                continue;
            }
            let x = self.stacked_state(f);
            let (pose, l) = camera::split_state(&f.lin_point);
            let Ok(h0) = project(&pose, &l, &self.intrinsics) else {
                continue;
            };
            let r = f.z - h0 - f.jacobian * (x - f.lin_point);
            energy += f.huber_weight * r.dot(&(f.sigma_inv * r));
        }
        energy
    }
}

fn set_prior<D: Dim>(node: &mut VariableNode<D>, strength: Option<&[f64]>, iteration: usize)
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    let dim = node.dim();
    let mut lambda = node.prior.initial_lambda.clone();
    lambda.fill(0.0);
    let max = strength.map_or(0.0, |s| s.iter().copied().fold(0.0, f64::max));
    let fallback = !(max > 0.0 && max.is_finite());
    for i in 0..dim {
        lambda[(i, i)] = if fallback {
            1.0
        } else {
            // zero columns (e.g. a landmark on the optical axis) still get a
            // tiny anchor so the belief stays invertible
            strength.unwrap()[i].max(1e-6 * max)
        };
    }
    node.prior = Prior {
        mean: node.state.clone(),
        initial_lambda: lambda,
        born_at: iteration,
        fallback,
    };
}

fn prior_term<D: Dim>(node: &VariableNode<D>, iteration: usize, weakening: &PriorWeakening) -> f64
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    let s = node.prior.scale_at(iteration, weakening);
    let d = &node.state - &node.prior.mean;
    s * d.dot(&(&node.prior.initial_lambda * &d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{KeyframeSpec, LandmarkSpec, MeasurementSpec};

    fn minimal() -> ProblemSpec {
        let mut p = ProblemSpec::new(Intrinsics::default());
        p.keyframes.push(KeyframeSpec {
            id: 0,
            pose: Pose::identity(),
            ground_truth: None,
        });
        p.landmarks.push(LandmarkSpec {
            id: 0,
            position: Vector3::new(0.1, -0.05, 1.2),
            ground_truth: None,
        });
        let h = project(
            &Pose::identity(),
            &Vector3::new(0.1, -0.05, 1.2),
            &Intrinsics::default(),
        )
        .unwrap();
        p.measurements.push(MeasurementSpec {
            keyframe: 0,
            landmark: 0,
            pixel: h,
            sigma: 1.0,
            outlier: false,
        });
        p
    }

    #[test]
    fn minimal_topology() {
        let g = FactorGraph::build(&minimal(), &GraphConfig::default()).unwrap();
        assert_eq!(g.num_variables(), 2);
        assert_eq!(g.num_factor_nodes(), 3);
        let f = &g.factors[0];
        assert!(f.msg_to_keyframe.is_zero() && f.msg_to_landmark.is_zero());
        assert!(f.from_keyframe.is_zero() && f.from_landmark.is_zero());
    }

    #[test]
    fn dangling_measurement() {
        let mut p = minimal();
        p.measurements[0].landmark = 4;
        let err = FactorGraph::build(&p, &GraphConfig::default()).unwrap_err();
        assert_eq!(
            err,
            GraphError::DanglingMeasurement {
                index: 0,
                keyframe: 0,
                landmark: 4
            }
        );
    }

    #[test]
    fn weakening_schedule() {
        let w = PriorWeakening::default();
        assert_eq!(w.scale(0), 1.0);
        assert_eq!(w.scale(10), 0.01);
        assert_eq!(w.scale(25), 0.01);
        for t in 0..12 {
            assert!(w.scale(t + 1) <= w.scale(t));
        }
    }

    #[test]
    fn prior_mean_fixed_under_weakening() {
        let g = FactorGraph::build(&minimal(), &GraphConfig::default()).unwrap();
        let node = &g.landmarks[0];
        for t in 0..12 {
            let p = node.prior.at(t, &g.weakening);
            let mean = p.mean().unwrap();
            assert!((mean - node.prior.mean).norm() < 1e-12 * node.prior.mean.norm());
        }
    }

    #[test]
    fn zero_factor_landmark_gets_unit_prior() {
        let mut p = minimal();
        p.landmarks.push(LandmarkSpec {
            id: 1,
            position: Vector3::new(1.0, 2.0, 3.0),
            ground_truth: None,
        });
        let g = FactorGraph::build(&p, &GraphConfig::default()).unwrap();
        let node = &g.landmarks[1];
        assert!(node.prior.fallback);
        assert_eq!(node.prior.initial_lambda, nalgebra::Matrix3::identity());
        assert_eq!(node.prior.mean, Vector3::new(1.0, 2.0, 3.0));
        assert!(g
            .diagnostics
            .fallback_priors
            .contains(&(VariableKind::Landmark, 1)));
    }

    #[test]
    fn zero_residual_at_prior_means_has_zero_energy() {
        let g = FactorGraph::build(&minimal(), &GraphConfig::default()).unwrap();
        assert_eq!(g.energy(), 0.0);
        assert_eq!(g.average_reprojection_error(), 0.0);
    }

    #[test]
    fn offset_measurement_are_and_energy() {
        let mut p = minimal();
        p.measurements[0].pixel += Vector2::new(3.0, 4.0);
        p.measurements[0].sigma = 2.0;
        let g = FactorGraph::build(&p, &GraphConfig::without_huber()).unwrap();
        assert!((g.average_reprojection_error() - 5.0).abs() < 1e-12);
        // rᵀr/σ² with priors at their means
        assert!((g.energy() - 25.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn huber_energy_is_linear_beyond_threshold() {
        let mut p = minimal();
        p.measurements[0].pixel += Vector2::new(0.0, 10.0);
        let g = FactorGraph::build(&p, &GraphConfig::default()).unwrap();
        // M = 10, N = 2 → 2·2·10 − 4
        assert!((g.energy() - 36.0).abs() < 1e-12);
    }

    #[test]
    fn add_measurement_between_existing_variables() {
        let mut g = FactorGraph::build(&minimal(), &GraphConfig::default()).unwrap();
        g.iteration = 5;
        let before_prior = g.keyframes[0].prior.clone();
        let id = g
            .add_measurement(0, 0, Vector2::new(300.0, 200.0), Matrix2::identity())
            .unwrap();
        assert_eq!(g.factors.len(), 2);
        assert!(g.factors[id].msg_to_keyframe.is_zero() && g.factors[id].msg_to_landmark.is_zero());
        assert_eq!(g.keyframes[0].prior, before_prior);
        assert!(g.factors[id].duplicate);
        assert_eq!(g.diagnostics.duplicate_measurements, 1);
        assert!(matches!(
            g.add_measurement(3, 0, Vector2::zeros(), Matrix2::identity()),
            Err(GraphError::UnknownKeyframe(3))
        ));
    }

    #[test]
    fn new_keyframe_copies_latest_pose() {
        let mut g = FactorGraph::build(&minimal(), &GraphConfig::default()).unwrap();
        g.keyframes[0].state[3] = 0.25;
        let id = g.add_keyframe_at_latest().unwrap();
        assert_eq!(g.keyframes[id].state, g.keyframes[0].state);
    }

    #[test]
    fn empty_measurements_give_isolated_variables() {
        let mut p = minimal();
        p.measurements.clear();
        let g = FactorGraph::build(&p, &GraphConfig::default()).unwrap();
        assert_eq!(g.num_factor_nodes(), 2);
        assert_eq!(g.diagnostics.fallback_priors.len(), 2);
        assert_eq!(g.average_reprojection_error(), 0.0);
    }

    #[test]
    fn fallback_diagnostic_cleared_once_measured() {
        let mut g = FactorGraph::new(Intrinsics::default(), &GraphConfig::default());
        let k = g.add_keyframe(&Pose::identity());
        let l = g.add_landmark(&Vector3::new(0.0, 0.0, 1.0));
        g.add_measurement(k, l, Vector2::new(319.5, 239.5), Matrix2::identity())
            .unwrap();
        assert!(g.diagnostics.fallback_priors.is_empty());
        assert!(!g.keyframes[k].prior.fallback && !g.landmarks[l].prior.fallback);
    }
}
