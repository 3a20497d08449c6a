//! Stiefel-manifold geometry: invariant-measure sampling, tangent projection,
//! Riemannian gradients, polar retraction, and the small dense linear algebra
//! they require.
//!
//! Two column-norm conventions coexist in the problem: unit columns for the
//! online-SGD setting and sqrt(N) columns for gradient flow and Langevin
//! dynamics. A single point type with a scale flag serves both, so convention
//! mixing is a type-checked error rather than a silent factor of N.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Hard invariant tolerance for constraint checks at construction.
pub const INVARIANT_TOL: f64 = 1e-10;

/// Column-norm convention: unit columns (St(N,r)) or sqrt(N) columns
/// (the normalized manifold used by the continuous dynamics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scale {
    Unit,
    SqrtN,
}

impl Scale {
    /// Squared column norm under this convention: 1 or N.
    #[inline]
    pub fn scale_sq(self, n: usize) -> f64 {
        match self {
            Scale::Unit => 1.0,
            Scale::SqrtN => n as f64,
        }
    }
}

/// An N x r frame X with X^T X = s^2 I_r, where s^2 is 1 or N.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    data: DMatrix<f64>,
    scale: Scale,
}

/// Frobenius deviation of X^T X / s^2 from the identity.
fn orthonormality_deviation(data: &DMatrix<f64>, scale_sq: f64) -> f64 {
    let r = data.ncols();
    let mut gram = data.tr_mul(data);
    gram /= scale_sq;
    for i in 0..r {
        gram[(i, i)] -= 1.0;
    }
    gram.norm()
}

impl StiefelPoint {
    /// Wrap a matrix after checking the manifold constraint to 1e-10.
    pub fn new(data: DMatrix<f64>, scale: Scale) -> Result<Self> {
        let (n, r) = (data.nrows(), data.ncols());
        if r < 1 || n < r {
            return Err(Error::InvalidDimension { n, r });
        }
        let dev = orthonormality_deviation(&data, scale.scale_sq(n));
        if !dev.is_finite() || dev > INVARIANT_TOL {
            return Err(Error::NotOnManifold { deviation: dev });
        }
        Ok(Self { data, scale })
    }

    pub(crate) fn new_unchecked(data: DMatrix<f64>, scale: Scale) -> Self {
        Self { data, scale }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    #[inline]
    pub fn r(&self) -> usize {
        self.data.ncols()
    }

    #[inline]
    pub fn scale(&self) -> Scale {
        self.scale
    }

    #[inline]
    pub fn scale_sq(&self) -> f64 {
        self.scale.scale_sq(self.n())
    }

    #[inline]
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.data.column(j).into_owned()
    }

    /// Convert between the unit and sqrt(N) conventions.
    pub fn to_scale(&self, scale: Scale) -> StiefelPoint {
        if scale == self.scale {
            return self.clone();
        }
        let n = self.n() as f64;
        let factor = match (self.scale, scale) {
            (Scale::Unit, Scale::SqrtN) => n.sqrt(),
            (Scale::SqrtN, Scale::Unit) => 1.0 / n.sqrt(),
            _ => unreachable!(),
        };
        StiefelPoint::new_unchecked(&self.data * factor, scale)
    }

    /// ||X^T X / s^2 - I||_F, the quantity bounded by the manifold invariant.
    pub fn constraint_deviation(&self) -> f64 {
        orthonormality_deviation(&self.data, self.scale_sq())
    }
}

/// A tangent direction U at some X, satisfying X^T U + U^T X = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    data: DMatrix<f64>,
}

impl TangentVector {
    /// Wrap a matrix after checking tangency at `base` to 1e-10.
    pub fn new(base: &StiefelPoint, data: DMatrix<f64>) -> Result<Self> {
        check_shape(base, &data)?;
        let dev = tangency_deviation(base, &data);
        if !dev.is_finite() || dev > INVARIANT_TOL {
            return Err(Error::NotTangent { deviation: dev });
        }
        Ok(Self { data })
    }

    pub(crate) fn new_unchecked(data: DMatrix<f64>) -> Self {
        Self { data }
    }

    pub fn zero(n: usize, r: usize) -> Self {
        Self {
            data: DMatrix::zeros(n, r),
        }
    }

    #[inline]
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn scaled(&self, factor: f64) -> TangentVector {
        TangentVector {
            data: &self.data * factor,
        }
    }
}

/// ||X^T U + U^T X||_F.
pub fn tangency_deviation(base: &StiefelPoint, u: &DMatrix<f64>) -> f64 {
    let xtu = base.data().tr_mul(u);
    (&xtu + xtu.transpose()).norm()
}

fn check_shape(x: &StiefelPoint, a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != x.n() || a.ncols() != x.r() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", x.n(), x.r()),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(())
}

/// The r x r correlation matrix M with M_ij = <v_i, x_j> / s^2.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    data: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn from_matrix(data: DMatrix<f64>) -> Self {
        Self { data }
    }

    #[inline]
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    #[inline]
    pub fn r(&self) -> usize {
        self.data.nrows()
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// G = M^T M together with its sorted eigenvalues theta_1 >= ... >= theta_r.
#[derive(Debug, Clone)]
pub struct OverlapGram {
    data: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl OverlapGram {
    #[inline]
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Eigenvalues sorted non-increasing.
    #[inline]
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }
}

/// Draw X from the invariant (rotation-invariant) measure via the explicit
/// representation X = Z (Z^T Z / N)^{-1/2} with i.i.d. standard normal Z,
/// rescaled to the requested convention.
pub fn sample_invariant<R: Rng + ?Sized>(
    n: usize,
    r: usize,
    scale: Scale,
    rng: &mut R,
) -> Result<StiefelPoint> {
    if r < 1 || n < r {
        return Err(Error::InvalidDimension { n, r });
    }
    let z = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let gram = z.tr_mul(&z) / n as f64;
    let inv_sqrt = inv_sqrt_psd(&gram)?;
    let mut x = z * inv_sqrt; // sqrt(N)-norm columns
    // one polish pass: idempotent in exact arithmetic, pulls rounding tails
    // of the eigendecomposition back to machine precision
    let gram2 = x.tr_mul(&x) / n as f64;
    x *= inv_sqrt_psd(&gram2)?;
    if scale == Scale::Unit {
        x /= (n as f64).sqrt();
    }
    StiefelPoint::new(x, scale)
}

/// Orthogonal projection onto the tangent space at X:
/// Pi_X A = A - X sym(X^T A) / s^2.
pub fn project_tangent(x: &StiefelPoint, a: &DMatrix<f64>) -> Result<TangentVector> {
    check_shape(x, a)?;
    let xta = x.data().tr_mul(a);
    let sym = (&xta + xta.transpose()) * 0.5;
    let data = a - x.data() * (sym / x.scale_sq());
    Ok(TangentVector::new_unchecked(data))
}

/// Riemannian gradient from a Euclidean gradient g:
/// grad = g - X (X^T g + g^T X) / (2 s^2).
pub fn riemannian_gradient(x: &StiefelPoint, g: &DMatrix<f64>) -> Result<TangentVector> {
    check_shape(x, g)?;
    let xtg = x.data().tr_mul(g);
    let gtx = g.tr_mul(x.data());
    let data = g - x.data() * ((xtg + gtx) / (2.0 * x.scale_sq()));
    Ok(TangentVector::new_unchecked(data))
}

/// Polar retraction R_X(U) = (X + U)(I_r + U^T U / s^2)^{-1/2}, adapted to the
/// column-norm convention.
pub fn polar_retract(x: &StiefelPoint, u: &TangentVector) -> Result<StiefelPoint> {
    check_shape(x, u.data())?;
    let s2 = x.scale_sq();
    let mut gram = u.data().tr_mul(u.data());
    gram /= s2;
    for i in 0..x.r() {
        gram[(i, i)] += 1.0;
    }
    let correction = inv_sqrt_psd(&gram)?;
    let moved = (x.data() + u.data()) * correction;
    Ok(StiefelPoint::new_unchecked(moved, x.scale()))
}

/// Inverse square root of a small symmetric positive definite matrix via
/// eigendecomposition. r is small here, so exactness beats any iterative
/// scheme.
pub fn inv_sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() != s.ncols() {
        return Err(Error::ShapeMismatch {
            expected: "square".into(),
            got: format!("{}x{}", s.nrows(), s.ncols()),
        });
    }
    let eigen = s.clone().symmetric_eigen();
    let max_abs = eigen
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = 1e-12 * max_abs.max(1e-300);
    let r = s.nrows();
    let mut inv_sqrt_diag = DVector::zeros(r);
    for i in 0..r {
        let ev = eigen.eigenvalues[i];
        if !ev.is_finite() {
            return Err(Error::NonFinite("eigenvalue"));
        }
        if ev <= tol {
            return Err(Error::SingularMatrix {
                eigenvalue: ev,
                tolerance: tol,
            });
        }
        inv_sqrt_diag[i] = 1.0 / ev.sqrt();
    }
    let v = &eigen.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&inv_sqrt_diag) * v.transpose())
}

/// Correlation matrix M_ij = <v_i, x_j> / s^2 between a reference frame V and
/// a point X on the same convention.
pub fn correlation_matrix(v: &StiefelPoint, x: &StiefelPoint) -> Result<CorrelationMatrix> {
    if v.scale() != x.scale() {
        return Err(Error::ConventionMismatch);
    }
    if v.n() != x.n() || v.r() != x.r() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", v.n(), v.r()),
            got: format!("{}x{}", x.n(), x.r()),
        });
    }
    let m = v.data().tr_mul(x.data()) / x.scale_sq();
    Ok(CorrelationMatrix::from_matrix(m))
}

/// Overlap Gram matrix G = M^T M with eigenvalues sorted non-increasing.
pub fn overlap_gram(m: &CorrelationMatrix) -> OverlapGram {
    let g = m.data().tr_mul(m.data());
    let eigenvalues = sorted_eigenvalues(&g);
    OverlapGram {
        data: g,
        eigenvalues,
    }
}

/// Eigenvalues of a symmetric matrix, sorted non-increasing.
pub fn sorted_eigenvalues(g: &DMatrix<f64>) -> Vec<f64> {
    let mut eigs: Vec<f64> = g
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eigs.sort_by(|a, b| b.total_cmp(a));
    eigs
}

/// Draw a random tangent direction at X with the given Frobenius norm.
pub fn random_tangent<R: Rng + ?Sized>(
    x: &StiefelPoint,
    norm: f64,
    rng: &mut R,
) -> TangentVector {
    let a = DMatrix::from_fn(x.n(), x.r(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = project_tangent(x, &a).expect("shape is consistent by construction");
    let current = u.norm();
    if current < 1e-300 {
        return TangentVector::zero(x.n(), x.r());
    }
    u.scaled(norm / current)
}
