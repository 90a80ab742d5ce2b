//! Dense symmetric linear algebra with a deterministic jitter policy.
//!
//! Every solve in the crate goes through [`CholeskyFactor`]. Factorization
//! retries with a diagonal jitter proportional to the mean diagonal, so a
//! rescaled matrix factorizes at the same ladder level as the original.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter levels tried in order by [`cholesky_psd`].
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Eigenvalues below this are treated as exact zeros by [`psd_sqrt`].
pub const EIGEN_FLOOR: f64 = 1e-10;

const ASYMMETRY_WARN: f64 = 1e-6;

/// A dense matrix that is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Symmetrizes `a` as `(a + aᵀ) / 2`. Asymmetry above 1e-6 relative is
    /// logged, not rejected.
    pub fn new(mut a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                context: "SymmetricMatrix::new",
                expected: a.nrows(),
                found: a.ncols(),
            });
        }
        if a.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                context: "SymmetricMatrix::new (empty)",
                expected: 1,
                found: 0,
            });
        }
        let n = a.nrows();
        let scale = a.amax();
        let mut max_asym = 0.0_f64;
        for j in 0..n {
            for i in (j + 1)..n {
                let (lo, hi) = (a[(i, j)], a[(j, i)]);
                max_asym = max_asym.max((lo - hi).abs());
                let avg = 0.5 * (lo + hi);
                a[(i, j)] = avg;
                a[(j, i)] = avg;
            }
        }
        if scale > 0.0 && max_asym > ASYMMETRY_WARN * scale {
            warn!(
                "symmetrizing {n}x{n} matrix with relative asymmetry {:.3e}",
                max_asym / scale
            );
        }
        Ok(SymmetricMatrix(a))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn mean_diagonal(&self) -> f64 {
        self.0.diagonal().mean()
    }
}

/// Lower Cholesky factor of a (possibly jittered) SPD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Relative jitter level (a member of [`JITTER_LADDER`]) that succeeded.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L⁻¹ b`.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(b.nrows(), "CholeskyFactor::half_solve")?;
        let mut x = b.clone();
        lower_solve(&self.lower, x.as_mut_slice(), false);
        Ok(x)
    }

    /// `L⁻ᵀ b`.
    pub fn half_solve_transpose(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(b.nrows(), "CholeskyFactor::half_solve_transpose")?;
        let mut x = b.clone();
        lower_solve(&self.lower, x.as_mut_slice(), true);
        Ok(x)
    }

    pub fn solve_vector(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(b.len(), "CholeskyFactor::solve_vector")?;
        let mut x = b.clone();
        lower_solve(&self.lower, x.as_mut_slice(), false);
        lower_solve(&self.lower, x.as_mut_slice(), true);
        Ok(x)
    }

    /// `log det(L Lᵀ)`.
    pub fn log_determinant(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn check_rows(&self, rows: usize, context: &'static str) -> Result<()> {
        if rows != self.dim() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim(),
                found: rows,
            });
        }
        Ok(())
    }
}

/// Solves `L x = b` (or `Lᵀ x = b`) in place for the column-major
/// right-hand sides stored in `rhs`.
fn lower_solve(lower: &DMatrix<f64>, rhs: &mut [f64], transpose: bool) {
    let n = lower.nrows();
    let l = faer::MatRef::from_column_major_slice(lower.as_slice(), n, n);
    let x = faer::MatMut::from_column_major_slice_mut(rhs, n, rhs.len() / n.max(1));
    if transpose {
        faer::linalg::triangular_solve::solve_upper_triangular_in_place(l.transpose(), x, faer::Par::Seq);
    } else {
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, x, faer::Par::Seq);
    }
}

/// Factorizes `a + jitter * mean(diag(a)) * I`, escalating `jitter` through
/// [`JITTER_LADDER`] until the factorization succeeds.
pub fn cholesky_psd(a: &SymmetricMatrix) -> Result<CholeskyFactor> {
    let n = a.dim();
    let reference = a.mean_diagonal();
    if a.as_matrix().iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            dim: n,
            max_jitter: 0.0,
        });
    }
    for &jitter in JITTER_LADDER.iter() {
        let mut m = a.as_matrix().clone();
        if jitter > 0.0 {
            if !(reference > 0.0) {
                break;
            }
            for i in 0..n {
                m[(i, i)] += jitter * reference;
            }
        }
        let view = faer::MatRef::from_column_major_slice(m.as_slice(), n, n);
        if let Ok(llt) = view.llt(faer::Side::Lower) {
            let l = llt.L();
            let lower = DMatrix::from_fn(n, n, |i, j| if i >= j { l[(i, j)] } else { 0.0 });
            if lower.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok(CholeskyFactor {
                    lower,
                    jitter_used: jitter,
                });
            }
        }
    }
    Err(Error::NotPositiveDefinite {
        dim: n,
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// Factorizes `a + shift * I`, escalating through [`JITTER_LADDER`] only if
/// the shifted matrix is not numerically positive definite. Two factors built
/// with the same `shift` describe matrices that differ exactly by their
/// unshifted difference.
pub fn cholesky_psd_shifted(a: &SymmetricMatrix, shift: f64) -> Result<CholeskyFactor> {
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(Error::Config(format!("Cholesky shift {shift} must be finite and non-negative")));
    }
    let mut shifted = a.as_matrix().clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += shift;
    }
    cholesky_psd(&SymmetricMatrix::new(shifted)?)
}

/// Absolute diagonal shift `jitter_used · mean(diag(a))` applied when `l`
/// factorized `a`.
pub fn absolute_jitter(l: &CholeskyFactor, a: &SymmetricMatrix) -> f64 {
    l.jitter_used * a.mean_diagonal()
}

/// Solves `(L Lᵀ) X = B`.
pub fn solve_with_factor(l: &CholeskyFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.check_rows(b.nrows(), "solve_with_factor")?;
    let mut x = b.clone();
    lower_solve(&l.lower, x.as_mut_slice(), false);
    lower_solve(&l.lower, x.as_mut_slice(), true);
    Ok(x)
}

/// `vᵀ (L Lᵀ)⁻¹ v`, computed as `‖L⁻¹ v‖²` so it is never negative.
pub fn quadratic_form(l: &CholeskyFactor, v: &DVector<f64>) -> Result<f64> {
    l.check_rows(v.len(), "quadratic_form")?;
    let mut x = v.clone();
    lower_solve(&l.lower, x.as_mut_slice(), false);
    Ok(x.norm_squared())
}

/// `Bᵀ (L Lᵀ)⁻¹ B` for a block of right-hand sides, symmetric by construction.
pub fn quadratic_form_matrix(l: &CholeskyFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let half = l.half_solve(b)?;
    Ok(half.transpose() * &half)
}

/// Eigenvalues (nondecreasing) and orthonormal eigenvectors of a symmetric
/// matrix. Falls back to nalgebra's QR iteration if the divide-and-conquer
/// solver does not converge.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let view = faer::MatRef::from_column_major_slice(a.as_slice(), n, n);
    match view.self_adjoint_eigen(faer::Side::Lower) {
        Ok(evd) => {
            let s = evd.S().column_vector();
            let u = evd.U();
            (DVector::from_fn(n, |i, _| s[i]), DMatrix::from_fn(n, n, |i, j| u[(i, j)]))
        }
        Err(_) => {
            let eig = SymmetricEigen::new(a.clone());
            (eig.eigenvalues, eig.eigenvectors)
        }
    }
}

/// PSD square root through a symmetric eigendecomposition; eigenvalues below
/// [`EIGEN_FLOOR`] are set to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 1 {
        let v = a[(0, 0)];
        return DMatrix::from_element(1, 1, if v > EIGEN_FLOOR { v.sqrt() } else { 0.0 });
    }
    let (values, q) = symmetric_eigen(a);
    let roots = values.map(|l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 });
    &q * DMatrix::from_diagonal(&roots) * q.transpose()
}

/// Eigen factor `F` with `F Fᵀ = a` after clamping negative eigenvalues to
/// zero. Used for sampling from Gaussians with a PSD covariance.
pub fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 1 {
        return DMatrix::from_element(1, 1, a[(0, 0)].max(0.0).sqrt());
    }
    let (values, q) = symmetric_eigen(a);
    q * DMatrix::from_diagonal(&values.map(|l| l.max(0.0).sqrt()))
}

/// `(a + aᵀ) / 2` in place.
pub fn symmetrize_in_place(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
}
