//! Small dense linear-algebra kernel.
//!
//! Everything here operates on `ndarray` matrices of modest size (state
//! dimensions below ~20, regressor Gram matrices below ~30), so the
//! implementations favor simplicity and numerical robustness over
//! asymptotics: Cholesky factorization for SPD solves, fixed-point
//! iteration for the discrete Riccati and Lyapunov equations, and
//! repeated squaring for spectral radii.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Iteration cap for the Riccati / Lyapunov fixed-point loops.
const FIXED_POINT_MAX_ITERS: usize = 100_000;
/// Relative step tolerance for the fixed-point loops.
const FIXED_POINT_TOL: f64 = 1e-12;
/// Number of squarings used by [`spectral_radius`]; 2^60 is far past the
/// point where the norm-root estimate has converged to machine precision.
const SPECTRAL_SQUARINGS: u32 = 60;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("matrix is not positive semi-definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveSemiDefinite { pivot: f64, index: usize },
    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Frobenius norm.
pub fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Replaces `m` with `(m + mᵀ)/2`, killing antisymmetric round-off drift.
pub fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
}

fn check_square(m: &ArrayView2<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(NumericsError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

/// Largest eigenvalue magnitude of a square matrix, accurate to ~1e-12
/// relative.
///
/// Uses the norm-root limit ρ(A) = lim ‖A^m‖^{1/m} evaluated by repeated
/// squaring with per-step renormalization, which handles complex
/// eigenvalue pairs of real matrices without any special casing.
pub fn spectral_radius(m: &ArrayView2<f64>) -> Result<f64> {
    check_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("spectral_radius input"));
    }
    let norm0 = frobenius(m);
    if norm0 == 0.0 {
        return Ok(0.0);
    }
    // Invariant: A^(2^k) = exp(log_scale) * b with ‖b‖_F = 1.
    let mut b = m.mapv(|v| v / norm0);
    let mut log_scale = norm0.ln();
    for _ in 0..SPECTRAL_SQUARINGS {
        let sq = b.dot(&b);
        let norm = frobenius(&sq.view());
        if norm == 0.0 {
            // Nilpotent: every eigenvalue is zero.
            return Ok(0.0);
        }
        b = sq.mapv(|v| v / norm);
        log_scale = 2.0 * log_scale + norm.ln();
    }
    Ok((log_scale / 2f64.powi(SPECTRAL_SQUARINGS as i32)).exp())
}

/// Spectral (operator 2-) norm, computed as √ρ(MᵀM).
pub fn spectral_norm(m: &ArrayView2<f64>) -> Result<f64> {
    let gram = m.t().dot(m);
    Ok(spectral_radius(&gram.view())?.sqrt())
}

/// `m^k` by repeated multiplication (`k` is small everywhere we use this).
pub fn matrix_power(m: &ArrayView2<f64>, k: usize) -> Array2<f64> {
    let n = m.nrows();
    let mut out = Array2::eye(n);
    for _ in 0..k {
        out = out.dot(m);
    }
    out
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, with solve and log-determinant helpers.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    /// Factors a strictly positive-definite matrix. Pivots at or below
    /// `1e-13 * max diag` are rejected.
    pub fn new(m: &ArrayView2<f64>) -> Result<Self> {
        Self::factor(m, false)
    }

    /// Factors a positive semi-definite matrix: near-zero pivots produce a
    /// zero column of the factor; negative pivots beyond tolerance are an
    /// error. `L·Lᵀ` still reproduces the input.
    pub fn new_psd(m: &ArrayView2<f64>) -> Result<Self> {
        Self::factor(m, true)
    }

    fn factor(m: &ArrayView2<f64>, allow_semidefinite: bool) -> Result<Self> {
        let n = check_square(m)?;
        let scale = m
            .diag()
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
            .max(1.0);
        let tol = 1e-13 * scale;
        let mut lower = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = m[[j, j]];
            for k in 0..j {
                diag -= lower[[j, k]] * lower[[j, k]];
            }
            if diag <= tol {
                if !allow_semidefinite {
                    return Err(NumericsError::NotPositiveDefinite {
                        pivot: diag,
                        index: j,
                    });
                }
                if diag < -tol {
                    return Err(NumericsError::NotPositiveSemiDefinite {
                        pivot: diag,
                        index: j,
                    });
                }
                // Semi-definite direction: leave the column at zero.
                continue;
            }
            let ljj = diag.sqrt();
            lower[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut v = m[[i, j]];
                for k in 0..j {
                    v -= lower[[i, k]] * lower[[j, k]];
                }
                lower[[i, j]] = v / ljj;
            }
        }
        Ok(Self { lower })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// log det of the factored matrix (natural log).
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `A x = b` for the factored `A`.
    pub fn solve_vec(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        let n = self.lower.nrows();
        assert_eq!(b.len(), n, "rhs length must match factor dimension");
        // Forward: L y = b
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= self.lower[[i, k]] * y[k];
            }
            y[i] = v / self.lower[[i, i]];
        }
        // Backward: Lᵀ x = y
        let mut x = Array1::<f64>::zeros(n);
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= self.lower[[k, i]] * x[k];
            }
            x[i] = v / self.lower[[i, i]];
        }
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &ArrayView2<f64>) -> Array2<f64> {
        let n = self.lower.nrows();
        assert_eq!(b.nrows(), n, "rhs rows must match factor dimension");
        let mut out = Array2::<f64>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            let x = self.solve_vec(&col);
            out.column_mut(j).assign(&x);
        }
        out
    }

    /// Inverse of the factored matrix.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.lower.nrows();
        let eye = Array2::<f64>::eye(n);
        let mut inv = self.solve_mat(&eye.view());
        symmetrize(&mut inv);
        inv
    }
}

/// A PSD square root `L` of `cov` with `L·Lᵀ = cov` (lower triangular,
/// zero columns where the matrix is singular).
pub fn psd_factor(cov: &ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(Cholesky::new_psd(cov)?.lower.clone())
}

/// Draws `mean + L·w` with `w` standard normal and `L` a precomputed PSD
/// factor of the covariance.
pub fn sample_with_factor<R: Rng + ?Sized>(
    mean: &ArrayView1<f64>,
    factor: &ArrayView2<f64>,
    rng: &mut R,
) -> Array1<f64> {
    let n = mean.len();
    let w = Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    factor.dot(&w) + mean
}

/// Draws one sample from N(mean, cov). The covariance may be singular
/// (semi-definite); a genuinely indefinite covariance is a domain error.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &ArrayView1<f64>,
    cov: &ArrayView2<f64>,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if cov.nrows() != mean.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "mean has length {} but covariance is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let factor = psd_factor(cov)?;
    Ok(sample_with_factor(mean, &factor.view(), rng))
}

/// Steady-state solution of the discrete algebraic Riccati equation for
/// the predictor form of the Kalman filter, plus the associated gain.
#[derive(Debug, Clone)]
pub struct DareSolution {
    /// Prediction error covariance P = ΓPΓᵀ + Q − ΓPCᵀ(CPCᵀ+R)⁻¹CPΓᵀ.
    pub p: Array2<f64>,
    /// Gain K = PCᵀ(CPCᵀ+R)⁻¹.
    pub gain: Array2<f64>,
}

/// Solves the predictor Riccati equation by fixed-point iteration of the
/// covariance map, starting from `q`.
///
/// Requires (gamma, c) observable and (gamma, q^{1/2}) controllable for
/// convergence; non-convergence within the iteration cap is reported with
/// the final residual.
pub fn solve_dare(
    gamma: &ArrayView2<f64>,
    c: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    r: &ArrayView2<f64>,
) -> Result<DareSolution> {
    let d = check_square(gamma)?;
    check_square(q)?;
    let m = check_square(r)?;
    if c.nrows() != m || c.ncols() != d || q.nrows() != d {
        return Err(NumericsError::DimensionMismatch(format!(
            "gamma {d}x{d}, c {}x{}, q {}x{}, r {m}x{m}",
            c.nrows(),
            c.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let mut p = q.to_owned();
    symmetrize(&mut p);
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let cp = c.dot(&p); // m x d
        let mut innov = cp.dot(&c.t()) + r; // m x m
        symmetrize(&mut innov);
        let chol = Cholesky::new(&innov.view())?;
        let k = chol.solve_mat(&cp.view()).t().to_owned(); // P Cᵀ S⁻¹, d x m
        let p_filt = &p - &k.dot(&cp);
        let mut p_next = gamma.dot(&p_filt).dot(&gamma.t()) + q;
        symmetrize(&mut p_next);
        residual = frobenius(&(&p_next - &p).view());
        let tol = FIXED_POINT_TOL * frobenius(&p_next.view()).max(1.0);
        p = p_next;
        if residual <= tol {
            // Recompute the gain from the converged covariance so that
            // (p, gain) satisfy the defining relation together.
            let cp = c.dot(&p);
            let mut innov = cp.dot(&c.t()) + r;
            symmetrize(&mut innov);
            let chol = Cholesky::new(&innov.view())?;
            let gain = chol.solve_mat(&cp.view()).t().to_owned();
            return Ok(DareSolution { p, gain });
        }
    }
    Err(NumericsError::NoConvergence {
        iterations: FIXED_POINT_MAX_ITERS,
        residual,
    })
}

/// Solves the discrete Lyapunov equation Z = ΓZΓᵀ + Q by fixed-point
/// iteration. Requires ρ(Γ) < 1.
pub fn solve_lyapunov(gamma: &ArrayView2<f64>, q: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = check_square(gamma)?;
    if q.nrows() != d || q.ncols() != d {
        return Err(NumericsError::DimensionMismatch(format!(
            "gamma {d}x{d} but q {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let mut z = q.to_owned();
    symmetrize(&mut z);
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let mut z_next = gamma.dot(&z).dot(&gamma.t()) + q;
        symmetrize(&mut z_next);
        residual = frobenius(&(&z_next - &z).view());
        let tol = FIXED_POINT_TOL * frobenius(&z_next.view()).max(1.0);
        z = z_next;
        if residual <= tol {
            return Ok(z);
        }
    }
    Err(NumericsError::NoConvergence {
        iterations: FIXED_POINT_MAX_ITERS,
        residual,
    })
}
