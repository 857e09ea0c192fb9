//! Log-Euclidean geometry on symmetric positive definite (SPD) matrices.
//!
//! Every map here goes through a symmetric eigendecomposition computed by
//! cyclic Jacobi rotations. Under the Log-Euclidean metric the manifold is
//! flattened by the matrix logarithm, so distances, weighted means and tangent
//! vectors reduce to Euclidean operations on `log(S)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Maximum number of Jacobi sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius mass, relative to `‖A‖_F`, at which Jacobi stops.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Eigenvalues below `LOG_EIGEN_FLOOR · σ_max` are clamped before the scalar log.
pub const LOG_EIGEN_FLOOR: f64 = 1e-12;
/// Largest argument accepted by `exp` without overflowing `f64`.
const EXP_MAX_ARG: f64 = 709.0;

/// A square matrix with `a[i][j] == a[j][i]` exactly: a tangent-space element.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

/// A point on the SPD manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

/// Eigenvectors (columns of `vectors`) and eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

/// Overwrites `m` with `(m + mᵀ) / 2`, exactly symmetric.
pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_square_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(invalid(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    Ok(())
}

impl SymMatrix {
    /// Symmetrizes `m` and wraps it. Rejects non-square or non-finite input.
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        check_square_finite(&m)?;
        symmetrize_in_place(&mut m);
        Ok(Self(m))
    }

    /// Wraps without checks; `m` is symmetrized but finiteness is not verified.
    pub(crate) fn from_matrix_unchecked(mut m: DMatrix<f64>) -> Self {
        symmetrize_in_place(&mut m);
        Self(m)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
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

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Frobenius inner product `⟨self, other⟩ = tr(selfᵀ other)`.
    pub fn inner(&self, other: &SymMatrix) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn scale(&self, factor: f64) -> SymMatrix {
        SymMatrix(&self.0 * factor)
    }
}

impl SpdMatrix {
    /// Symmetrizes `m` and verifies positive definiteness via [`sym_eig`].
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let sym = SymMatrix::new(m)?;
        Self::try_from_sym(sym)
    }

    pub fn try_from_sym(sym: SymMatrix) -> Result<Self> {
        let eig = sym_eig(&sym)?;
        let min = eig.min_value();
        if min <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
        }
        Ok(Self(sym.0))
    }

    /// Wraps a symmetric matrix the caller knows to be positive definite.
    pub(crate) fn from_sym_unchecked(sym: SymMatrix) -> Self {
        Self(sym.0)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if diag.is_empty() || diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("diagonal SPD matrix needs finite positive entries"));
        }
        Ok(Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag))))
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

    pub fn to_sym(&self) -> SymMatrix {
        SymMatrix(self.0.clone())
    }

    /// Smallest eigenvalue, recomputed from scratch.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(sym_eig(&self.to_sym())?.min_value())
    }
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn max_value(&self) -> f64 {
        self.values[0]
    }

    pub fn min_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `U · diag(f(σ)) · Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mapped: Vec<f64> = self.values.iter().map(|&s| f(s)).collect();
        self.compose(&mapped)
    }

    /// `U · diag(diag) · Uᵀ`.
    pub fn compose(&self, diag: &[f64]) -> SymMatrix {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for (j, d) in diag.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*d);
        }
        let mut out = DMatrix::zeros(n, n);
        out.gemm(1.0, &scaled, &self.vectors.transpose(), 0.0);
        SymMatrix::from_matrix_unchecked(out)
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|s| s)
    }
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in descending order (stable for ties) and each
/// eigenvector is signed so that its largest-magnitude entry is positive.
pub fn sym_eig(s: &SymMatrix) -> Result<EigenPair> {
    let n = s.dim();
    if s.0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("sym_eig: non-finite entries"));
    }
    let mut a = s.0.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = JACOBI_TOLERANCE * a.norm();

    let mut converged = off_diagonal_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a) <= tol;
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite"));

    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[(src, src)];
        let col = v.column(src);
        let max_abs = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let pivot = col
            .iter()
            .position(|x| x.abs() >= max_abs * (1.0 - 1e-10))
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    Ok(EigenPair { vectors, values })
}

/// Matrix logarithm with the clamp flag: `true` when an eigenvalue fell
/// under `LOG_EIGEN_FLOOR · σ_max` and was lifted to that floor.
pub fn matrix_log_flagged(s: &SpdMatrix) -> Result<(SymMatrix, bool)> {
    let eig = sym_eig(&s.to_sym())?;
    log_from_eig(&eig)
}

pub(crate) fn log_from_eig(eig: &EigenPair) -> Result<(SymMatrix, bool)> {
    let min = eig.min_value();
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    let floor = LOG_EIGEN_FLOOR * eig.max_value();
    let clamped = min < floor;
    if clamped {
        log::warn!("matrix_log: eigenvalue {min:e} clamped to {floor:e}");
    }
    Ok((eig.map(|s| s.max(floor).ln()), clamped))
}

/// `log(S) = U · diag(log σ) · Uᵀ`.
pub fn matrix_log(s: &SpdMatrix) -> Result<SymMatrix> {
    matrix_log_flagged(s).map(|(l, _)| l)
}

/// `exp(A) = U · diag(exp σ) · Uᵀ`; always SPD.
pub fn matrix_exp(a: &SymMatrix) -> Result<SpdMatrix> {
    let eig = sym_eig(a)?;
    exp_from_eig(&eig)
}

pub(crate) fn exp_from_eig(eig: &EigenPair) -> Result<SpdMatrix> {
    if eig.max_value() > EXP_MAX_ARG {
        return Err(Error::NumericalFailure(format!(
            "matrix_exp: eigenvalue {} overflows",
            eig.max_value()
        )));
    }
    if eig.min_value().exp() <= 0.0 {
        return Err(Error::NumericalFailure(format!(
            "matrix_exp: eigenvalue {} underflows to zero",
            eig.min_value()
        )));
    }
    Ok(SpdMatrix::from_sym_unchecked(eig.map(f64::exp)))
}

/// `S + eps·I`, rejected when the result is still not positive definite.
pub fn regularize(s: &SymMatrix, eps: f64) -> Result<SpdMatrix> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(invalid(format!("regularize: eps must be positive, got {eps}")));
    }
    let mut m = s.0.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    SpdMatrix::try_from_sym(SymMatrix(m))
}

/// Log-Euclidean distance `‖log A − log B‖_F`.
pub fn le_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "le_distance: dimension mismatch {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let la = matrix_log(a)?;
    let lb = matrix_log(b)?;
    Ok((la.0 - lb.0).norm())
}

/// Weighted Fréchet mean under the Log-Euclidean metric: `exp(Σ wⱼ log Vⱼ)`.
pub fn le_weighted_mean(weights: &[f64], mats: &[SpdMatrix]) -> Result<SpdMatrix> {
    if mats.is_empty() {
        return Err(invalid("le_weighted_mean: empty sequence"));
    }
    if weights.len() != mats.len() {
        return Err(invalid(format!(
            "le_weighted_mean: {} weights for {} matrices",
            weights.len(),
            mats.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid("le_weighted_mean: weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("le_weighted_mean: weights sum to {total}, not 1")));
    }
    let n = mats[0].dim();
    if mats.iter().any(|m| m.dim() != n) {
        return Err(invalid("le_weighted_mean: matrices differ in dimension"));
    }
    let mut acc = DMatrix::zeros(n, n);
    for (w, m) in weights.iter().zip(mats) {
        if *w == 0.0 {
            continue;
        }
        acc += matrix_log(m)?.0 * *w;
    }
    matrix_exp(&SymMatrix::from_matrix_unchecked(acc))
}

/// Mean-centered sample covariance with divisor `L` (columns are samples).
pub fn sample_covariance(epoch: &DMatrix<f64>) -> Result<SymMatrix> {
    let len = epoch.ncols();
    if len == 0 || epoch.nrows() == 0 {
        return Err(invalid("covariance: epoch has no samples"));
    }
    if epoch.iter().any(|v| !v.is_finite()) {
        return Err(invalid("covariance: non-finite samples"));
    }
    let mut centered = epoch.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let mut cov = DMatrix::zeros(epoch.nrows(), epoch.nrows());
    cov.gemm(1.0 / len as f64, &centered, &centered.transpose(), 0.0);
    Ok(SymMatrix::from_matrix_unchecked(cov))
}

/// Sample covariance of an `N×L` epoch plus `eps·I`.
pub fn covariance_spd(epoch: &DMatrix<f64>, eps: f64) -> Result<SpdMatrix> {
    regularize(&sample_covariance(epoch)?, eps)
}

/// Length of the upper-triangular vectorization of an `n×n` matrix.
pub fn vec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Row-major upper triangle with off-diagonal entries scaled by `√2`, so
/// that `‖vec_upper(A)‖₂ = ‖A‖_F`.
pub fn vec_upper(a: &SymMatrix) -> DVector<f64> {
    let n = a.dim();
    let mut out = DVector::zeros(vec_len(n));
    let mut k = 0;
    for i in 0..n {
        out[k] = a.0[(i, i)];
        k += 1;
        for j in (i + 1)..n {
            out[k] = std::f64::consts::SQRT_2 * a.0[(i, j)];
            k += 1;
        }
    }
    out
}

/// Inverse of [`vec_upper`].
pub fn unvec_upper(v: &[f64], n: usize) -> Result<SymMatrix> {
    if v.len() != vec_len(n) {
        return Err(invalid(format!(
            "unvec_upper: length {} does not match dim {n}",
            v.len()
        )));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        m[(i, i)] = v[k];
        k += 1;
        for j in (i + 1)..n {
            let x = v[k] / std::f64::consts::SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    Ok(SymMatrix(m))
}
