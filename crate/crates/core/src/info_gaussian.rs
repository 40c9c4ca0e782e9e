//! Gaussians in information form.
//!
//! A density `N⁻¹(x; η, Λ) ∝ exp(-½ xᵀΛx + ηᵀx)`. Every message, belief and
//! prior in the solver is one of these. The type is generic over the nalgebra
//! dimension so the engine can run on stack-allocated 3/6/9 blocks while the
//! dense oracle and the public algebra work on dynamically sized ones.

use std::ops::Range;

use nalgebra::allocator::Allocator;
use nalgebra::{Cholesky, DMatrix, DVector, DefaultAllocator, Dim, Dyn, OMatrix, OVector, U1};
use thiserror::Error;

/// Maximum tolerated `|Λ_ij - Λ_ji|`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Relative pivot threshold used by every block solve.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussianError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("information matrix is not symmetric (max asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },
    #[error("keep range {start}..{end} is invalid for a {dim}-dimensional Gaussian")]
    InvalidRange {
        start: usize,
        end: usize,
        dim: usize,
    },
    #[error("singular block in marginalisation ({}x{} block)", block.nrows(), block.ncols())]
    SingularMarginal { block: DMatrix<f64> },
    #[error("information matrix is not invertible")]
    NotInvertible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoGaussian<D: Dim = Dyn>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    pub eta: OVector<f64, D>,
    pub lambda: OMatrix<f64, D, D>,
}

pub type Gaussian3 = InfoGaussian<nalgebra::U3>;
pub type Gaussian6 = InfoGaussian<nalgebra::U6>;
pub type Gaussian9 = InfoGaussian<nalgebra::U9>;

impl<D: Dim> InfoGaussian<D>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    /// Builds a Gaussian after checking dimensions and symmetry.
    pub fn new(eta: OVector<f64, D>, lambda: OMatrix<f64, D, D>) -> Result<Self, GaussianError> {
        if eta.nrows() != lambda.nrows() || lambda.nrows() != lambda.ncols() {
            return Err(GaussianError::DimensionMismatch {
                left: eta.nrows(),
                right: lambda.nrows(),
            });
        }
        let g = Self { eta, lambda };
        let asymmetry = g.asymmetry();
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(GaussianError::Asymmetric { asymmetry });
        }
        Ok(g)
    }

    /// The zero-information Gaussian of the given dimension.
    pub fn zeros_generic(dim: D) -> Self {
        Self {
            eta: OVector::zeros_generic(dim, U1),
            lambda: OMatrix::zeros_generic(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.eta.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.eta.iter().all(|v| *v == 0.0) && self.lambda.iter().all(|v| *v == 0.0)
    }

    fn check_dims(&self, other: &Self) -> Result<(), GaussianError> {
        if self.dim() != other.dim() {
            return Err(GaussianError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }

    /// Product of densities: information parameters add.
    pub fn product(&self, other: &Self) -> Result<Self, GaussianError> {
        self.check_dims(other)?;
        Ok(Self {
            eta: &self.eta + &other.eta,
            lambda: &self.lambda + &other.lambda,
        })
    }

    /// Quotient of densities. The result may be indefinite.
    pub fn quotient(&self, other: &Self) -> Result<Self, GaussianError> {
        self.check_dims(other)?;
        Ok(Self {
            eta: &self.eta - &other.eta,
            lambda: &self.lambda - &other.lambda,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            eta: &self.eta * factor,
            lambda: &self.lambda * factor,
        }
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.lambda[(i, j)] - self.lambda[(j, i)]).abs());
            }
        }
        worst
    }

    /// Λ ← (Λ + Λᵀ)/2.
    pub fn symmetrize(&mut self) {
        let n = self.dim();
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.lambda[(i, j)] + self.lambda[(j, i)]);
                self.lambda[(i, j)] = avg;
                self.lambda[(j, i)] = avg;
            }
        }
    }

    pub fn from_moments(
        mean: &OVector<f64, D>,
        covariance: &OMatrix<f64, D, D>,
    ) -> Result<Self, GaussianError> {
        if mean.nrows() != covariance.nrows() {
            return Err(GaussianError::DimensionMismatch {
                left: mean.nrows(),
                right: covariance.nrows(),
            });
        }
        let chol = spd_factor(covariance).ok_or(GaussianError::NotInvertible)?;
        let mut lambda = chol.inverse();
        symmetrize_matrix(&mut lambda);
        let eta = &lambda * mean;
        Ok(Self { eta, lambda })
    }

    /// Mean `Λ⁻¹η` and covariance `Λ⁻¹`.
    pub fn to_moments(&self) -> Result<(OVector<f64, D>, OMatrix<f64, D, D>), GaussianError> {
        let chol = spd_factor(&self.lambda).ok_or(GaussianError::NotInvertible)?;
        let mean = chol.solve(&self.eta);
        let mut cov = chol.inverse();
        symmetrize_matrix(&mut cov);
        Ok((mean, cov))
    }

    /// Mean only; cheaper than [`Self::to_moments`].
    pub fn mean(&self) -> Result<OVector<f64, D>, GaussianError> {
        let chol = spd_factor(&self.lambda).ok_or(GaussianError::NotInvertible)?;
        Ok(chol.solve(&self.eta))
    }

    /// Smallest eigenvalue of Λ.
    pub fn min_eigenvalue(&self) -> f64 {
        let dense = DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.lambda[(i, j)]);
        dense
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// True when Λ is positive semi-definite within `1e-8 · max(1, trace)`.
    pub fn is_psd(&self) -> bool {
        if self.dim() == 0 {
            return true;
        }
        self.min_eigenvalue() >= -1e-8 * self.lambda.trace().max(1.0)
    }

    pub fn to_dynamic(&self) -> InfoGaussian<Dyn> {
        let n = self.dim();
        InfoGaussian::<Dyn> {
            eta: DVector::from_fn(n, |i, _| self.eta[i]),
            lambda: DMatrix::from_fn(n, n, |i, j| self.lambda[(i, j)]),
        }
    }

    /// Rounds every parameter through `f32`.
    pub fn round_to_single(&mut self) {
        self.eta.apply(|v| *v = *v as f32 as f64);
        self.lambda.apply(|v| *v = *v as f32 as f64);
    }
}

impl InfoGaussian<Dyn> {
    pub fn zeros(dim: usize) -> Self {
        Self::zeros_generic(Dyn(dim))
    }

    /// Marginalises out every dimension outside `keep`.
    ///
    /// Any conditioning on the eliminated block must already be folded into
    /// `self` by the caller.
    pub fn marginalize_onto(&self, keep: Range<usize>) -> Result<InfoGaussian<Dyn>, GaussianError> {
        let n = self.dim();
        if keep.start > keep.end || keep.end > n {
            return Err(GaussianError::InvalidRange {
                start: keep.start,
                end: keep.end,
                dim: n,
            });
        }
        let kept: Vec<usize> = keep.clone().collect();
        let elim: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
        let pick_vec = |idx: &[usize]| DVector::from_fn(idx.len(), |i, _| self.eta[idx[i]]);
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
                self.lambda[(rows[i], cols[j])]
            })
        };
        schur_complement(
            &pick_vec(&kept),
            &pick_vec(&elim),
            &pick(&kept, &kept),
            &pick(&kept, &elim),
            &pick(&elim, &elim),
        )
    }
}

macro_rules! impl_static_zero {
    ($($n:literal),*) => {$(
        impl InfoGaussian<nalgebra::Const<$n>> {
            pub fn zero() -> Self {
                Self::zeros_generic(nalgebra::Const::<$n>)
            }
        }
    )*};
}
impl_static_zero!(1, 2, 3, 6, 9);

/// Cholesky factor of an SPD block, rejecting pivots below
/// `PIVOT_TOLERANCE · trace`.
pub(crate) fn spd_factor<D: Dim>(m: &OMatrix<f64, D, D>) -> Option<Cholesky<f64, D>>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    let trace = m.trace();
    if m.nrows() == 0 {
        return Cholesky::new(m.clone());
    }
    if !(trace > 0.0) || !trace.is_finite() {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    let threshold = PIVOT_TOLERANCE * trace;
    let l = chol.l_dirty();
    for i in 0..m.nrows() {
        let pivot = l[(i, i)] * l[(i, i)];
        if pivot < threshold {
            return None;
        }
    }
    Some(chol)
}

pub(crate) fn symmetrize_matrix<D: Dim>(m: &mut OMatrix<f64, D, D>)
where
    DefaultAllocator: Allocator<D, D>,
{
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Schur complement of a two-block joint onto block `a`:
/// `η' = η_a − Λ_ab Λ_bb⁻¹ η_b`, `Λ' = Λ_aa − Λ_ab Λ_bb⁻¹ Λ_ba`.
///
/// `Λ_bb` is factorised, never inverted. The result is re-symmetrised.
pub fn schur_complement<A: Dim, B: Dim>(
    eta_a: &OVector<f64, A>,
    eta_b: &OVector<f64, B>,
    lambda_aa: &OMatrix<f64, A, A>,
    lambda_ab: &OMatrix<f64, A, B>,
    lambda_bb: &OMatrix<f64, B, B>,
) -> Result<InfoGaussian<A>, GaussianError>
where
    DefaultAllocator: Allocator<A>
        + Allocator<B>
        + Allocator<A, A>
        + Allocator<A, B>
        + Allocator<B, B>
        + Allocator<B, A>,
{
    if lambda_bb.nrows() == 0 {
        return Ok(InfoGaussian {
            eta: eta_a.clone(),
            lambda: lambda_aa.clone(),
        });
    }
    let chol = spd_factor(lambda_bb).ok_or_else(|| GaussianError::SingularMarginal {
        block: DMatrix::from_fn(lambda_bb.nrows(), lambda_bb.ncols(), |i, j| {
            lambda_bb[(i, j)]
        }),
    })?;
    // Λ_bb⁻¹ Λ_ba and Λ_bb⁻¹ η_b
    let lambda_ba = lambda_ab.transpose();
    let x = chol.solve(&lambda_ba);
    let y = chol.solve(eta_b);
    let mut out = InfoGaussian {
        eta: eta_a - lambda_ab * y,
        lambda: lambda_aa - lambda_ab * x,
    };
    out.symmetrize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector, Matrix3, Vector3};

    fn g1(eta: f64, lambda: f64) -> InfoGaussian {
        InfoGaussian::new(dvector![eta], dmatrix![lambda]).unwrap()
    }

    #[test]
    fn product_identity_and_scalar() {
        let a = InfoGaussian::new(dvector![1.0, -2.0], dmatrix![2.0, 0.5; 0.5, 3.0]).unwrap();
        let zero = InfoGaussian::zeros(2);
        assert_eq!(zero.product(&a).unwrap(), a);
        let p = g1(1.0, 2.0).product(&g1(3.0, 4.0)).unwrap();
        assert_eq!(p, g1(4.0, 6.0));
    }

    #[test]
    fn quotient_cases() {
        let a = InfoGaussian::new(dvector![1.0, -2.0], dmatrix![2.0, 0.5; 0.5, 3.0]).unwrap();
        let b = InfoGaussian::new(dvector![0.25, 7.0], dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        assert!(a.quotient(&a).unwrap().is_zero());
        assert_eq!(a.product(&b).unwrap().quotient(&b).unwrap(), a);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = InfoGaussian::zeros(2);
        let b = InfoGaussian::zeros(3);
        assert!(matches!(
            a.product(&b),
            Err(GaussianError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            a.quotient(&b),
            Err(GaussianError::DimensionMismatch { .. })
        ));
        assert!(InfoGaussian::new(dvector![1.0], dmatrix![1.0, 0.0; 0.0, 1.0]).is_err());
    }

    #[test]
    fn asymmetric_lambda_rejected() {
        let err = InfoGaussian::new(dvector![0.0, 0.0], dmatrix![1.0, 0.5; 0.4, 1.0]).unwrap_err();
        assert!(matches!(err, GaussianError::Asymmetric { .. }));
    }

    #[test]
    fn hand_schur_complement() {
        let joint = InfoGaussian::new(dvector![0.0, 0.0], dmatrix![1.0, -1.0; -1.0, 2.0]).unwrap();
        let m = joint.marginalize_onto(0..1).unwrap();
        assert_eq!(m.eta[0], 0.0);
        assert!((m.lambda[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn block_diagonal_marginal_is_identity() {
        let joint = InfoGaussian::new(
            dvector![1.0, 2.0, 3.0],
            dmatrix![2.0, 0.3, 0.0; 0.3, 1.0, 0.0; 0.0, 0.0, 5.0],
        )
        .unwrap();
        let m = joint.marginalize_onto(0..2).unwrap();
        assert_eq!(m.eta, dvector![1.0, 2.0]);
        assert_eq!(m.lambda, dmatrix![2.0, 0.3; 0.3, 1.0]);
        // keeping a trailing block works too
        let tail = joint.marginalize_onto(2..3).unwrap();
        assert_eq!(tail.lambda[(0, 0)], 5.0);
    }

    #[test]
    fn singular_block_reports_offender() {
        let joint = InfoGaussian::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 0.0]).unwrap();
        match joint.marginalize_onto(0..1) {
            Err(GaussianError::SingularMarginal { block }) => assert_eq!(block, dmatrix![0.0]),
            other => panic!("unexpected {other:?}"),
        }
        // rank-deficient 3x3 (rank 2)
        let j = nalgebra::Matrix2x3::new(1.0, 2.0, 0.5, -0.3, 0.7, 1.1);
        let rank2 = j.transpose() * j;
        assert!(spd_factor(&rank2).is_none());
    }

    #[test]
    fn invalid_range() {
        let joint = InfoGaussian::zeros(3);
        assert!(matches!(
            joint.marginalize_onto(2..5),
            Err(GaussianError::InvalidRange { .. })
        ));
    }

    #[test]
    fn moments_scalar() {
        let (mean, cov) = g1(2.0, 2.0).to_moments().unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-15);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-15);
        let (mean, _) = InfoGaussian::new(dvector![0.0, 0.0], dmatrix![3.0, 1.0; 1.0, 2.0])
            .unwrap()
            .to_moments()
            .unwrap();
        assert_eq!(mean, dvector![0.0, 0.0]);
        assert_eq!(g1(1.0, 0.0).to_moments(), Err(GaussianError::NotInvertible));
    }

    #[test]
    fn static_dims_work() {
        let mut g = Gaussian3::zero();
        g.lambda = Matrix3::identity() * 2.0;
        g.eta = Vector3::new(2.0, 4.0, 6.0);
        assert!((g.mean().unwrap() - Vector3::new(1.0, 2.0, 3.0)).amax() < 1e-14);
        assert!(g.is_psd());
    }

    #[test]
    fn single_precision_rounding() {
        let mut g = g1(0.1, 1.0 / 3.0);
        g.round_to_single();
        assert_eq!(g.eta[0], 0.1f32 as f64);
        assert_eq!(g.lambda[(0, 0)], (1.0f32 / 3.0) as f64);
    }
}
