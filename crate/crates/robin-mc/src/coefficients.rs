//! The coefficient matrix field `a(x)` of the operator `L = Σ ∂_i(a_ij ∂_j)`.
//!
//! Uniform ellipticity (`Λ⁻¹|ξ|² ≤ ξᵀa(x)ξ ≤ Λ|ξ|²`) is sample-checked at
//! startup rather than proven: `a` is user configuration and sampling catches
//! mistakes cheaply. The module derives the three quantities the SDE needs:
//!
//! * the diffusion square root `σ` with `σσᵀ = 2a` (the bilinear form carries
//!   no 1/2, so the generator's diffusion matrix is `2a`, not `a`),
//! * the divergence drift `b_i = Σ_j ∂a_ij/∂x_j`,
//! * the conormal reflection direction `a(p)·n(p)` at the boundary.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::Domain;
use crate::Result;

/// Matrix-valued coefficient function for [`FieldKind::Callable`].
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
/// Closed-form divergence drift for [`FieldKind::Callable`].
pub type DriftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Univariate polynomial with ascending coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Polynomial { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    /// Closed-form first derivative.
    #[inline]
    pub fn eval_derivative(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for (k, c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * s + (k as f64) * c;
        }
        acc
    }
}

#[derive(Clone)]
pub enum FieldKind {
    /// Constant symmetric matrix.
    Constant(DMatrix<f64>),
    /// Diagonal field with `a_ii(x) = p_i(x_i)` for per-axis polynomials.
    DiagonalPolynomial(Vec<Polynomial>),
    /// Arbitrary matrix function, with an optional closed-form divergence
    /// drift. Without it the drift falls back to central finite differences.
    Callable { eval: MatrixFn, drift: Option<DriftFn> },
}

impl fmt::Debug for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            FieldKind::DiagonalPolynomial(p) => f.debug_tuple("DiagonalPolynomial").field(p).finish(),
            FieldKind::Callable { drift, .. } => f
                .debug_struct("Callable")
                .field("has_drift", &drift.is_some())
                .finish(),
        }
    }
}

/// The symmetric coefficient field with its ellipticity constant.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    kind: FieldKind,
    dim: usize,
    lambda_ell: f64,
    fd_step: f64,
}

/// Sampled eigenvalue bounds of `a(x)` against `[Λ⁻¹, Λ]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
    pub samples: usize,
}

const SYMMETRY_TOL: f64 = 1e-12;
const ELLIPTICITY_SLACK: f64 = 1e-10;
const DEFAULT_FD_STEP: f64 = 1e-5;

impl CoefficientField {
    /// Constant symmetric matrix field.
    pub fn constant(matrix: DMatrix<f64>, lambda_ell: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidParameter("coefficient matrix must be square".into()));
        }
        let dim = matrix.nrows();
        let max_asym = max_asymmetry(&matrix);
        if max_asym > SYMMETRY_TOL {
            return Err(Error::AsymmetricCoefficient { at: vec![0.0; dim], max_asymmetry: max_asym });
        }
        Self::validate_lambda(lambda_ell)?;
        Ok(CoefficientField {
            kind: FieldKind::Constant(matrix),
            dim,
            lambda_ell,
            fd_step: DEFAULT_FD_STEP,
        })
    }

    /// Isotropic constant field `value * I`.
    pub fn isotropic(dim: usize, value: f64, lambda_ell: f64) -> Result<Self> {
        Self::constant(DMatrix::identity(dim, dim) * value, lambda_ell)
    }

    /// Diagonal field `a_ii(x) = p_i(x_i)`, one polynomial per axis.
    pub fn diagonal_polynomial(polys: Vec<Polynomial>, lambda_ell: f64) -> Result<Self> {
        if polys.is_empty() {
            return Err(Error::InvalidParameter("diagonal field needs at least one axis".into()));
        }
        Self::validate_lambda(lambda_ell)?;
        let dim = polys.len();
        Ok(CoefficientField {
            kind: FieldKind::DiagonalPolynomial(polys),
            dim,
            lambda_ell,
            fd_step: DEFAULT_FD_STEP,
        })
    }

    /// Arbitrary matrix function with optional closed-form drift.
    pub fn callable(dim: usize, eval: MatrixFn, drift: Option<DriftFn>, lambda_ell: f64) -> Result<Self> {
        Self::validate_lambda(lambda_ell)?;
        Ok(CoefficientField { kind: FieldKind::Callable { eval, drift }, dim, lambda_ell, fd_step: DEFAULT_FD_STEP })
    }

    fn validate_lambda(lambda_ell: f64) -> Result<()> {
        if !(lambda_ell >= 1.0) || !lambda_ell.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "ellipticity constant must satisfy lambda_ell >= 1, got {lambda_ell}"
            )));
        }
        Ok(())
    }

    /// Step for finite-difference drift derivatives (defaults to 1e-5;
    /// configuration scales it to 1e-5 of the domain diameter).
    pub fn with_fd_step(mut self, fd_step: f64) -> Result<Self> {
        if !(fd_step > 0.0) || !fd_step.is_finite() {
            return Err(Error::InvalidParameter(format!("fd_step must be positive, got {fd_step}")));
        }
        self.fd_step = fd_step;
        Ok(self)
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda_ell(&self) -> f64 {
        self.lambda_ell
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    /// Evaluate `a(x)`.
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            FieldKind::Constant(m) => m.clone(),
            FieldKind::DiagonalPolynomial(polys) => {
                let mut m = DMatrix::zeros(self.dim, self.dim);
                for (i, p) in polys.iter().enumerate() {
                    m[(i, i)] = p.eval(x[i]);
                }
                m
            }
            FieldKind::Callable { eval, .. } => eval(x),
        }
    }

    /// Whether `a(x)` is diagonal for every `x` by construction.
    pub fn is_diagonal(&self) -> bool {
        match &self.kind {
            FieldKind::Constant(m) => {
                let mut diag = true;
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        if i != j && m[(i, j)] != 0.0 {
                            diag = false;
                        }
                    }
                }
                diag
            }
            FieldKind::DiagonalPolynomial(_) => true,
            FieldKind::Callable { .. } => false,
        }
    }

    /// Lower-triangular `σ(x)` with `σσᵀ = 2a(x)`.
    pub fn diffusion_sqrt(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let two_a = self.eval(x) * 2.0;
        match nalgebra::Cholesky::new(two_a) {
            Some(chol) => Ok(chol.unpack()),
            None => Err(Error::NotPositiveDefinite { at: x.to_vec() }),
        }
    }

    /// Divergence drift `b_i(x) = Σ_j ∂a_ij/∂x_j(x)`.
    ///
    /// Closed form for constant and diagonal-polynomial fields and for
    /// callables that supply one; otherwise central finite differences with
    /// error `O(fd_step²)`.
    pub fn divergence_drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.divergence_drift_into(x, &mut out);
        out
    }

    #[inline]
    pub(crate) fn divergence_drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            FieldKind::Constant(_) => out.fill(0.0),
            FieldKind::DiagonalPolynomial(polys) => {
                for (i, p) in polys.iter().enumerate() {
                    out[i] = p.eval_derivative(x[i]);
                }
            }
            FieldKind::Callable { eval, drift } => match drift {
                Some(d) => out.copy_from_slice(&d(x)),
                None => {
                    let h = self.fd_step;
                    let mut xp = x.to_vec();
                    out.fill(0.0);
                    for j in 0..self.dim {
                        xp[j] = x[j] + h;
                        let plus = eval(&xp);
                        xp[j] = x[j] - h;
                        let minus = eval(&xp);
                        xp[j] = x[j];
                        for i in 0..self.dim {
                            out[i] += (plus[(i, j)] - minus[(i, j)]) / (2.0 * h);
                        }
                    }
                }
            },
        }
    }

    /// Conormal direction `a(p)·n` — the reflection direction of the
    /// diffusion at a boundary point with inward normal `n`.
    pub fn conormal(&self, p: &[f64], n: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.conormal_into(p, n, &mut out);
        out
    }

    #[inline]
    pub(crate) fn conormal_into(&self, p: &[f64], n: &[f64], out: &mut [f64]) {
        debug_assert_eq!(n.len(), self.dim);
        match &self.kind {
            FieldKind::Constant(m) => {
                for i in 0..self.dim {
                    let mut s = 0.0;
                    for j in 0..self.dim {
                        s += m[(i, j)] * n[j];
                    }
                    out[i] = s;
                }
            }
            FieldKind::DiagonalPolynomial(polys) => {
                for (i, poly) in polys.iter().enumerate() {
                    out[i] = poly.eval(p[i]) * n[i];
                }
            }
            FieldKind::Callable { eval, .. } => {
                let m = eval(p);
                for i in 0..self.dim {
                    let mut s = 0.0;
                    for j in 0..self.dim {
                        s += m[(i, j)] * n[j];
                    }
                    out[i] = s;
                }
            }
        }
    }

    /// Eigenvalue bounds of `a(x)` at uniform sample points of the domain,
    /// checked against `[Λ⁻¹, Λ]` with 1e-10 slack.
    pub fn ellipticity_report(
        &self,
        domain: &Domain,
        samples: usize,
        rng_seed: u64,
    ) -> Result<EllipticityReport> {
        if samples == 0 {
            return Err(Error::InvalidParameter("ellipticity check needs samples >= 1".into()));
        }
        if domain.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: domain.dim() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut min_eig = f64::INFINITY;
        let mut max_eig = f64::NEG_INFINITY;
        for _ in 0..samples {
            let x = domain.sample_interior(&mut rng);
            let a = self.eval(&x);
            let asym = max_asymmetry(&a);
            if asym > SYMMETRY_TOL {
                return Err(Error::AsymmetricCoefficient { at: x, max_asymmetry: asym });
            }
            let eigs = a.symmetric_eigenvalues();
            for e in eigs.iter() {
                min_eig = min_eig.min(*e);
                max_eig = max_eig.max(*e);
            }
        }
        let pass = min_eig >= 1.0 / self.lambda_ell - ELLIPTICITY_SLACK
            && max_eig <= self.lambda_ell + ELLIPTICITY_SLACK;
        Ok(EllipticityReport { min_eig, max_eig, pass, samples })
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut max = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            max = max.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    max
}

/// Dense row-major matrix-vector product helper for prepared stepping.
#[inline]
pub(crate) fn dense_matvec(dim: usize, m: &[f64], z: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        let row = &m[i * dim..(i + 1) * dim];
        let mut s = 0.0;
        for j in 0..dim {
            s += row[j] * z[j];
        }
        out[i] = s;
    }
}

/// Precomputed per-simulation view of the field, so the stepping loop avoids
/// repeated Cholesky factorizations for constant fields.
#[derive(Debug, Clone)]
pub(crate) enum PreparedSqrt {
    /// Row-major dense lower-triangular factor of a constant field.
    ConstDense(Vec<f64>),
    /// Diagonal field: factor entries are `sqrt(2 a_ii(x_i))`.
    DiagPoly,
    /// General field: factorize at every step.
    General,
}

impl PreparedSqrt {
    pub fn new(field: &CoefficientField) -> Result<Self> {
        match field.kind() {
            FieldKind::Constant(_) => {
                let sigma = field.diffusion_sqrt(&vec![0.0; field.dim()])?;
                let dim = field.dim();
                let mut dense = vec![0.0; dim * dim];
                for i in 0..dim {
                    for j in 0..dim {
                        dense[i * dim + j] = sigma[(i, j)];
                    }
                }
                Ok(PreparedSqrt::ConstDense(dense))
            }
            FieldKind::DiagonalPolynomial(_) => Ok(PreparedSqrt::DiagPoly),
            FieldKind::Callable { .. } => Ok(PreparedSqrt::General),
        }
    }

    /// `out = σ(x)·z`.
    #[inline]
    pub fn matvec_into(
        &self,
        field: &CoefficientField,
        x: &[f64],
        z: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            PreparedSqrt::ConstDense(sigma) => {
                dense_matvec(field.dim(), sigma, z, out);
                Ok(())
            }
            PreparedSqrt::DiagPoly => {
                let FieldKind::DiagonalPolynomial(polys) = field.kind() else {
                    unreachable!("prepared form out of sync with field kind");
                };
                for (i, p) in polys.iter().enumerate() {
                    let v = 2.0 * p.eval(x[i]);
                    if !(v > 0.0) {
                        return Err(Error::NotPositiveDefinite { at: x.to_vec() });
                    }
                    out[i] = v.sqrt() * z[i];
                }
                Ok(())
            }
            PreparedSqrt::General => {
                let sigma = field.diffusion_sqrt(x)?;
                let zv = DVector::from_column_slice(z);
                let r = sigma * zv;
                out.copy_from_slice(r.as_slice());
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn half_identity() -> CoefficientField {
        CoefficientField::isotropic(3, 0.5, 2.0).unwrap()
    }

    fn diag_poly_field() -> CoefficientField {
        // a = diag(1 + x1^2, 1, 1) / 2
        CoefficientField::diagonal_polynomial(
            vec![
                Polynomial::new(vec![0.5, 0.0, 0.5]),
                Polynomial::new(vec![0.5]),
                Polynomial::new(vec![0.5]),
            ],
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn ellipticity_constant_isotropic() {
        let domain = Domain::ball(vec![0.0; 3], 1.0).unwrap();
        let report = half_identity().ellipticity_report(&domain, 100, 1).unwrap();
        assert!((report.min_eig - 0.5).abs() < 1e-14);
        assert!((report.max_eig - 0.5).abs() < 1e-14);
        assert!(report.pass);
    }

    #[test]
    fn ellipticity_diag_poly_on_ball() {
        let domain = Domain::ball(vec![0.0; 3], 1.0).unwrap();
        let report = diag_poly_field().ellipticity_report(&domain, 500, 2).unwrap();
        assert!((report.min_eig - 0.5).abs() < 1e-14);
        assert!(report.max_eig <= 1.0);
        assert!(report.pass);
    }

    #[test]
    fn ellipticity_violation_detected() {
        let domain = Domain::ball(vec![0.0; 3], 1.0).unwrap();
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 1.0]));
        let field = CoefficientField::constant(a, 2.0).unwrap();
        let report = field.ellipticity_report(&domain, 50, 3).unwrap();
        assert!(!report.pass);
        assert!((report.max_eig - 3.0).abs() < 1e-14);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let mut a = DMatrix::identity(3, 3);
        a[(0, 1)] = 0.1;
        assert!(matches!(
            CoefficientField::constant(a, 2.0),
            Err(Error::AsymmetricCoefficient { .. })
        ));
    }

    #[test]
    fn diffusion_sqrt_isotropic() {
        let sigma = half_identity().diffusion_sqrt(&[0.0, 0.0, 0.0]).unwrap();
        assert!((sigma - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-14);
    }

    #[test]
    fn diffusion_sqrt_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 1.5]));
        let field = CoefficientField::constant(a, 3.0).unwrap();
        let sigma = field.diffusion_sqrt(&[0.0; 3]).unwrap();
        assert!((sigma[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((sigma[(1, 1)] - 2.0f64.sqrt()).abs() < 1e-14);
        assert!((sigma[(2, 2)] - 3.0f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn diffusion_sqrt_reconstructs_2a_in_2d() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let field = CoefficientField::constant(a.clone(), 2.0).unwrap();
        let sigma = field.diffusion_sqrt(&[0.0, 0.0]).unwrap();
        assert!(sigma[(0, 1)].abs() < 1e-15, "sigma must be lower triangular");
        let recon = &sigma * sigma.transpose();
        assert!((recon - a * 2.0).abs().max() < 1e-12);
    }

    #[test]
    fn diffusion_sqrt_rejects_non_spd() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0, 1.0]));
        let field = CoefficientField::constant(a, 2.0).unwrap();
        assert!(matches!(
            field.diffusion_sqrt(&[0.0; 3]),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn sqrt_reconstruction_random_spd() {
        // 10^3 random SPD matrices within the ellipticity bounds.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let dim = 3;
            // Random orthogonal Q from QR of a Gaussian matrix, eigenvalues in [0.5, 2].
            let raw = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            let q = raw.qr().q();
            let eigs = DVector::from_fn(dim, |_, _| rng.gen_range(0.5..2.0));
            let a = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
            let a = (&a + a.transpose()) * 0.5;
            let field = CoefficientField::constant(a.clone(), 2.0).unwrap();
            let sigma = field.diffusion_sqrt(&[0.0; 3]).unwrap();
            let recon = &sigma * sigma.transpose();
            assert!((recon - a * 2.0).abs().max() <= 1e-10);
        }
    }

    #[test]
    fn drift_constant_is_zero() {
        assert_eq!(half_identity().divergence_drift(&[0.3, -0.2, 0.9]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn drift_diag_poly_closed_form() {
        let b = diag_poly_field().divergence_drift(&[0.3, 0.0, 0.0]);
        assert!((b[0] - 0.3).abs() < 1e-15);
        assert_eq!(b[1], 0.0);
        assert_eq!(b[2], 0.0);
    }

    #[test]
    fn drift_finite_difference_matches_closed_form() {
        let eval: MatrixFn = Arc::new(|x: &[f64]| {
            let mut m = DMatrix::zeros(3, 3);
            m[(0, 0)] = 0.5 * (1.0 + x[0] * x[0]);
            m[(1, 1)] = 0.5;
            m[(2, 2)] = 0.5;
            m
        });
        let field = CoefficientField::callable(3, eval, None, 2.0).unwrap();
        let b = field.divergence_drift(&[0.3, 0.0, 0.0]);
        assert!((b[0] - 0.3).abs() < 1e-8, "fd drift {} vs closed form 0.3", b[0]);

        // 10^3 random interior points against the closed form, within 1e-6.
        let closed = diag_poly_field();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let fd = field.divergence_drift(&x);
            let cf = closed.divergence_drift(&x);
            for i in 0..3 {
                assert!((fd[i] - cf[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conormal_examples() {
        let c = half_identity().conormal(&[0.0, 0.0, -1.0], &[0.0, 0.0, 1.0]);
        assert_eq!(c, vec![0.0, 0.0, 0.5]);

        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 1.5]));
        let field = CoefficientField::constant(a, 3.0).unwrap();
        let c = field.conormal(&[0.0, 0.0, -1.0], &[0.0, 0.0, 1.0]);
        assert_eq!(c, vec![0.0, 0.0, 1.5]);

        // Isotropic case: direction equals the normal, scaled by 1/2.
        let n = [0.6, 0.0, 0.8];
        let c = half_identity().conormal(&[0.0, 0.0, 0.0], &n);
        for i in 0..3 {
            assert!((c[i] - 0.5 * n[i]).abs() < 1e-15);
        }
    }
}
