//! SPDNet-style layers: BiMap, ReEig and LogEig, with their backward rules,
//! plus the QR retraction that keeps BiMap weights on the Stiefel manifold.
//!
//! The backward rules of spectral layers share one construction. For
//! `F(S) = U g(Σ) Uᵀ` and a symmetric upstream gradient `G`,
//!
//! ```text
//! ∇_S = U (L ∘ (Uᵀ G U)) Uᵀ,   L_ij = (g(σ_i) − g(σ_j)) / (σ_i − σ_j),  L_ii = g'(σ_i)
//! ```
//!
//! where `L` is the Loewner (divided-difference) matrix. Nearly equal
//! eigenvalues fall back to the derivative limit on the off-diagonal too.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::random::random_stiefel;
use crate::spd::{sym_eig, EigenPair, SpdMatrix, SymMatrix};

/// Relative eigenvalue gap below which a pair is treated as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-10;
/// Default ReEig floor, equal to the SPD regularization scale.
pub const DEFAULT_REEIG_THRESHOLD: f64 = 1e-4;

/// A `d×l` BiMap weight with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct BiMapWeight(DMatrix<f64>);

impl BiMapWeight {
    pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;

    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() == 0 || w.ncols() > w.nrows() {
            return Err(invalid(format!(
                "BiMap weight must be d×l with 0 < l <= d, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        let drift = orthogonality_drift(&w);
        if !(drift <= Self::ORTHOGONALITY_TOLERANCE) {
            return Err(invalid(format!("BiMap weight is not semi-orthogonal (drift {drift:e})")));
        }
        Ok(Self(w))
    }

    /// The first `l` columns of the `d×d` identity.
    pub fn identity_selector(d: usize, l: usize) -> Result<Self> {
        Self::new(DMatrix::identity(d, l))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize, l: usize) -> Self {
        Self(random_stiefel(rng, d, l))
    }

    pub fn input_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// `‖WᵀW − I‖_F`.
pub fn orthogonality_drift(w: &DMatrix<f64>) -> f64 {
    let l = w.ncols();
    (w.tr_mul(w) - DMatrix::identity(l, l)).norm()
}

/// Gradients produced by a BiMap backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub wrt_input: SymMatrix,
    pub wrt_weight: DMatrix<f64>,
}

/// `WᵀSW` for a raw weight, symmetrized.
pub(crate) fn congruence(w: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let sw = s * w;
    let mut out = w.tr_mul(&sw);
    crate::spd::symmetrize_in_place(&mut out);
    out
}

pub(crate) fn congruence_backward(
    w: &DMatrix<f64>,
    s: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let wg = w * upstream;
    let mut d_input = &wg * w.transpose();
    crate::spd::symmetrize_in_place(&mut d_input);
    let d_weight = (s * &wg) * 2.0;
    (d_input, d_weight)
}

fn check_bimap_dims(w: &BiMapWeight, s_dim: usize) -> Result<()> {
    if w.input_dim() != s_dim {
        return Err(invalid(format!(
            "BiMap expects a {}x{} input, got dimension {s_dim}",
            w.input_dim(),
            w.input_dim()
        )));
    }
    Ok(())
}

/// `WᵀSW`, an `l×l` SPD matrix.
pub fn bimap_forward(w: &BiMapWeight, s: &SpdMatrix) -> Result<SpdMatrix> {
    check_bimap_dims(w, s.dim())?;
    Ok(SpdMatrix::from_sym_unchecked(SymMatrix::from_matrix_unchecked(congruence(
        &w.0,
        s.as_matrix(),
    ))))
}

/// Gradients of `⟨G, WᵀSW⟩`: `W G Wᵀ` for the input and `2 S W G` for the weight.
pub fn bimap_backward(w: &BiMapWeight, s: &SpdMatrix, upstream: &SymMatrix) -> Result<LayerGrad> {
    check_bimap_dims(w, s.dim())?;
    if upstream.dim() != w.output_dim() {
        return Err(invalid(format!(
            "BiMap upstream gradient must be {}x{}",
            w.output_dim(),
            w.output_dim()
        )));
    }
    let (d_input, d_weight) = congruence_backward(&w.0, s.as_matrix(), upstream.as_matrix());
    Ok(LayerGrad {
        wrt_input: SymMatrix::from_matrix_unchecked(d_input),
        wrt_weight: d_weight,
    })
}

/// A scalar function applied to the spectrum of a symmetric matrix.
pub trait SpectralFn {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
    /// `(f(a) − f(b)) / (a − b)` for `a != b`.
    fn divided_difference(&self, a: f64, b: f64) -> f64 {
        (self.value(a) - self.value(b)) / (a - b)
    }
}

pub struct Log;
pub struct Exp;
pub struct Clamp(pub f64);

impl SpectralFn for Log {
    fn value(&self, x: f64) -> f64 {
        x.ln()
    }
    fn derivative(&self, x: f64) -> f64 {
        1.0 / x
    }
    fn divided_difference(&self, a: f64, b: f64) -> f64 {
        (a / b).ln() / (a - b)
    }
}

impl SpectralFn for Exp {
    fn value(&self, x: f64) -> f64 {
        x.exp()
    }
    fn derivative(&self, x: f64) -> f64 {
        x.exp()
    }
    fn divided_difference(&self, a: f64, b: f64) -> f64 {
        b.exp() * (a - b).exp_m1() / (a - b)
    }
}

impl SpectralFn for Clamp {
    fn value(&self, x: f64) -> f64 {
        x.max(self.0)
    }
    fn derivative(&self, x: f64) -> f64 {
        if x > self.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Loewner matrix of `f` at the spectrum `values`.
pub fn loewner_matrix(values: &[f64], f: &impl SpectralFn) -> DMatrix<f64> {
    let n = values.len();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (values[i], values[j]);
        if i == j || (a - b).abs() <= DEGENERACY_GAP * scale {
            f.derivative(0.5 * (a + b))
        } else {
            f.divided_difference(a, b)
        }
    })
}

/// Pulls a symmetric upstream gradient back through `S ↦ U f(Σ) Uᵀ`, then
/// symmetrizes the result.
pub fn spectral_backward(eig: &EigenPair, f: &impl SpectralFn, upstream: &DMatrix<f64>) -> SymMatrix {
    let mut g = upstream.clone();
    crate::spd::symmetrize_in_place(&mut g);
    let u = &eig.vectors;
    let inner = u.tr_mul(&(&g * u));
    let loewner = loewner_matrix(eig.values.as_slice(), f);
    let core = inner.component_mul(&loewner);
    SymMatrix::from_matrix_unchecked(u * core * u.transpose())
}

fn check_upstream(s_dim: usize, upstream: &SymMatrix) -> Result<()> {
    if upstream.dim() != s_dim {
        return Err(invalid(format!(
            "upstream gradient dimension {} does not match input {s_dim}",
            upstream.dim()
        )));
    }
    Ok(())
}

/// Lifts every eigenvalue below `threshold` to `threshold`.
pub fn reeig_forward(s: &SpdMatrix, threshold: f64) -> Result<SpdMatrix> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(invalid(format!("ReEig threshold must be positive, got {threshold}")));
    }
    let eig = sym_eig(&s.to_sym())?;
    Ok(SpdMatrix::from_sym_unchecked(eig.map(|x| x.max(threshold))))
}

pub fn reeig_backward(s: &SpdMatrix, threshold: f64, upstream: &SymMatrix) -> Result<SymMatrix> {
    check_upstream(s.dim(), upstream)?;
    let eig = sym_eig(&s.to_sym())?;
    Ok(spectral_backward(&eig, &Clamp(threshold), upstream.as_matrix()))
}

/// Gradient of `L ∘ log` at `S`, given `upstream = ∂L/∂log(S)`.
pub fn logeig_backward(s: &SpdMatrix, upstream: &SymMatrix) -> Result<SymMatrix> {
    check_upstream(s.dim(), upstream)?;
    let eig = sym_eig(&s.to_sym())?;
    if eig.min_value() <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: eig.min_value() });
    }
    Ok(spectral_backward(&eig, &Log, upstream.as_matrix()))
}

/// Gradient of `L ∘ exp` at the symmetric matrix `a`.
pub fn expm_backward(a: &SymMatrix, upstream: &SymMatrix) -> Result<SymMatrix> {
    check_upstream(a.dim(), upstream)?;
    let eig = sym_eig(a)?;
    Ok(spectral_backward(&eig, &Exp, upstream.as_matrix()))
}

/// One projected-gradient step on the Stiefel manifold followed by a QR
/// retraction (positive-diagonal `R`).
pub fn stiefel_retract(w: &BiMapWeight, euclid_grad: &DMatrix<f64>, lr: f64) -> Result<BiMapWeight> {
    let next = stiefel_step(&w.0, euclid_grad, lr)?;
    Ok(BiMapWeight(next))
}

/// Riemannian gradient on the Stiefel manifold: `G − W sym(WᵀG)`.
pub fn stiefel_project(w: &DMatrix<f64>, euclid_grad: &DMatrix<f64>) -> DMatrix<f64> {
    let mut wtg = w.tr_mul(euclid_grad);
    crate::spd::symmetrize_in_place(&mut wtg);
    euclid_grad - w * wtg
}

pub(crate) fn stiefel_step(w: &DMatrix<f64>, euclid_grad: &DMatrix<f64>, lr: f64) -> Result<DMatrix<f64>> {
    if w.shape() != euclid_grad.shape() {
        return Err(invalid(format!(
            "Stiefel gradient shape {:?} does not match weight {:?}",
            euclid_grad.shape(),
            w.shape()
        )));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(invalid(format!("learning rate must be nonnegative, got {lr}")));
    }
    let moved = w - stiefel_project(w, euclid_grad) * lr;
    qr_orthonormalize(&moved)
}

/// Thin QR factor `Q` with the sign convention `diag(R) > 0`.
pub fn qr_orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.norm();
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m.ncols() {
        let rjj = r[(j, j)];
        if !(rjj.abs() > 1e-12 * scale) {
            return Err(Error::NumericalFailure(format!(
                "QR retraction lost rank at column {j} (|r| = {:e})",
                rjj.abs()
            )));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{relative_error, symmetric_central_difference};
    use crate::random::{gaussian_matrix, random_spd, random_sym, spd_with_spectrum};
    use crate::spd::{le_distance, matrix_exp, matrix_log};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bimap_identity_and_selector() {
        let mut r = rng(1);
        let s = random_spd(&mut r, 4, 10.0);
        let id = BiMapWeight::identity_selector(4, 4).unwrap();
        assert_eq!(bimap_forward(&id, &s).unwrap().as_matrix(), s.as_matrix());
        let sel = BiMapWeight::identity_selector(4, 2).unwrap();
        let out = bimap_forward(&sel, &s).unwrap();
        assert_eq!(out.as_matrix(), &s.as_matrix().view((0, 0), (2, 2)).clone_owned());
    }

    #[test]
    fn bimap_matches_naive_triple_product() {
        let mut r = rng(2);
        for _ in 0..10 {
            let w = BiMapWeight::random(&mut r, 6, 3);
            let s = random_spd(&mut r, 6, 100.0);
            let out = bimap_forward(&w, &s).unwrap();
            let (wm, sm) = (w.as_matrix(), s.as_matrix());
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..6 {
                        for j in 0..6 {
                            acc += wm[(i, a)] * sm[(i, j)] * wm[(j, b)];
                        }
                    }
                    assert!((out.as_matrix()[(a, b)] - acc).abs() < 1e-12);
                }
            }
            assert!(out.min_eigenvalue().unwrap() > 0.0);
        }
    }

    #[test]
    fn bimap_rejects_mismatch() {
        let w = BiMapWeight::identity_selector(4, 2).unwrap();
        assert!(bimap_forward(&w, &SpdMatrix::identity(3)).is_err());
        assert!(bimap_backward(&w, &SpdMatrix::identity(4), &SymMatrix::zeros(3)).is_err());
        assert!(BiMapWeight::new(DMatrix::from_element(3, 2, 1.0)).is_err());
    }

    #[test]
    fn bimap_backward_trivial() {
        let mut r = rng(3);
        let s = random_spd(&mut r, 4, 10.0);
        let w = BiMapWeight::random(&mut r, 4, 2);
        let g = bimap_backward(&w, &s, &SymMatrix::zeros(2)).unwrap();
        assert_eq!(g.wrt_input.frobenius_norm(), 0.0);
        assert_eq!(g.wrt_weight.norm(), 0.0);
        let up = random_sym(&mut r, 4, 1.0);
        let id = BiMapWeight::identity_selector(4, 4).unwrap();
        let g = bimap_backward(&id, &s, &up).unwrap();
        assert!((g.wrt_input.as_matrix() - up.as_matrix()).norm() < 1e-15);
    }

    #[test]
    fn bimap_backward_finite_differences() {
        let mut r = rng(4);
        for _ in 0..5 {
            let w = BiMapWeight::random(&mut r, 5, 3);
            let s = random_spd(&mut r, 5, 10.0);
            let gup = random_sym(&mut r, 3, 1.0);
            let grad = bimap_backward(&w, &s, &gup).unwrap();
            let probe_s = |x: &DMatrix<f64>| congruence(w.as_matrix(), x).dot(gup.as_matrix());
            let fd = symmetric_central_difference(&probe_s, s.as_matrix(), 1e-5);
            assert!(relative_error(&fd, grad.wrt_input.as_matrix()) <= 1e-6);
            let probe_w = |x: &DMatrix<f64>| congruence(x, s.as_matrix()).dot(gup.as_matrix());
            let fd = crate::gradcheck::central_difference(&probe_w, w.as_matrix(), 1e-5);
            assert!(relative_error(&fd, &grad.wrt_weight) <= 1e-6);
        }
    }

    #[test]
    fn reeig_forward_cases() {
        let mut r = rng(5);
        let s = random_spd(&mut r, 4, 10.0);
        let out = reeig_forward(&s, 1e-4).unwrap();
        assert!((out.as_matrix() - s.as_matrix()).norm() <= 1e-10);
        let d = SpdMatrix::from_diagonal(&[1e-6, 1.0]).unwrap();
        let out = reeig_forward(&d, 1e-4).unwrap();
        assert!((out.as_matrix() - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1e-4, 1.0]))).norm() < 1e-16);
    }

    #[test]
    fn reeig_matches_spectral_oracle() {
        let mut r = rng(6);
        let spectrum = [3.0, 0.5, 2e-5, 1e-7, 1e-9];
        let s = spd_with_spectrum(&mut r, &spectrum);
        let out = reeig_forward(&s, 1e-4).unwrap();
        let e = sym_eig(&out.to_sym()).unwrap();
        let mut expected: Vec<f64> = spectrum.iter().map(|x| x.max(1e-4)).collect();
        expected.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in e.values.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert!(e.min_value() >= 1e-4 * (1.0 - 1e-10));
    }

    #[test]
    fn reeig_backward_cases() {
        let mut r = rng(7);
        let s = random_spd(&mut r, 4, 10.0);
        let up = random_sym(&mut r, 4, 1.0);
        let g = reeig_backward(&s, 1e-4, &up).unwrap();
        assert!((g.as_matrix() - up.as_matrix()).norm() <= 1e-12);

        let d = SpdMatrix::from_diagonal(&[1e-6, 1.0, 2.0]).unwrap();
        let up = SymMatrix::from_diagonal(&[5.0, 6.0, 7.0]);
        let g = reeig_backward(&d, 1e-4, &up).unwrap();
        assert!(g.as_matrix()[(0, 0)].abs() < 1e-15);
        assert!((g.as_matrix()[(1, 1)] - 6.0).abs() < 1e-14);
        assert!((g.as_matrix()[(2, 2)] - 7.0).abs() < 1e-14);
    }

    #[test]
    fn reeig_backward_finite_differences() {
        let mut r = rng(8);
        for _ in 0..5 {
            // Keep every eigenvalue well away from the clamp boundary.
            let s = spd_with_spectrum(&mut r, &[2.0, 0.7, 1e-2, 1e-6]);
            let thr = 1e-3;
            let gup = random_sym(&mut r, 4, 1.0);
            let grad = reeig_backward(&s, thr, &gup).unwrap();
            let f = |x: &DMatrix<f64>| {
                let sym = SymMatrix::new(x.clone()).unwrap();
                sym_eig(&sym).unwrap().map(|v| v.max(thr)).as_matrix().dot(gup.as_matrix())
            };
            let fd = symmetric_central_difference(&f, s.as_matrix(), 1e-7);
            let err = relative_error(&fd, grad.as_matrix());
            assert!(err <= 1e-5, "err {err}");
        }
    }

    #[test]
    fn logeig_backward_cases() {
        let mut r = rng(9);
        let up = random_sym(&mut r, 3, 1.0);
        let g = logeig_backward(&SpdMatrix::identity(3), &up).unwrap();
        assert!((g.as_matrix() - up.as_matrix()).norm() <= 1e-14);

        let d = SpdMatrix::from_diagonal(&[2.0, 0.5, 4.0]).unwrap();
        let up = SymMatrix::from_diagonal(&[1.0, 3.0, -2.0]);
        let g = logeig_backward(&d, &up).unwrap();
        let expected = [0.5, 6.0, -0.5];
        for i in 0..3 {
            assert!((g.as_matrix()[(i, i)] - expected[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn logeig_backward_finite_differences() {
        let mut r = rng(10);
        for _ in 0..10 {
            let s = random_spd(&mut r, 4, 50.0);
            let gup = random_sym(&mut r, 4, 1.0);
            let grad = logeig_backward(&s, &gup).unwrap();
            let f = |x: &DMatrix<f64>| {
                matrix_log(&SpdMatrix::new(x.clone()).unwrap()).unwrap().as_matrix().dot(gup.as_matrix())
            };
            let fd = symmetric_central_difference(&f, s.as_matrix(), 1e-5);
            assert!(relative_error(&fd, grad.as_matrix()) <= 1e-5);
        }
    }

    #[test]
    fn logeig_backward_degenerate_spectrum() {
        // Repeated eigenvalues exercise the derivative limit.
        let mut r = rng(11);
        let s = spd_with_spectrum(&mut r, &[2.0, 2.0, 0.5]);
        let gup = random_sym(&mut r, 3, 1.0);
        let grad = logeig_backward(&s, &gup).unwrap();
        let f = |x: &DMatrix<f64>| {
            matrix_log(&SpdMatrix::new(x.clone()).unwrap()).unwrap().as_matrix().dot(gup.as_matrix())
        };
        let fd = symmetric_central_difference(&f, s.as_matrix(), 1e-5);
        assert!(relative_error(&fd, grad.as_matrix()) <= 1e-5);
    }

    #[test]
    fn expm_backward_finite_differences() {
        let mut r = rng(12);
        for _ in 0..5 {
            let a = random_sym(&mut r, 4, 0.7);
            let gup = random_sym(&mut r, 4, 1.0);
            let grad = expm_backward(&a, &gup).unwrap();
            let f = |x: &DMatrix<f64>| {
                matrix_exp(&SymMatrix::new(x.clone()).unwrap()).unwrap().as_matrix().dot(gup.as_matrix())
            };
            let fd = symmetric_central_difference(&f, a.as_matrix(), 1e-5);
            assert!(relative_error(&fd, grad.as_matrix()) <= 1e-6);
        }
    }

    #[test]
    fn reeig_then_distance_never_nan() {
        let mut r = rng(13);
        for _ in 0..20 {
            let s = spd_with_spectrum(&mut r, &[1.0, 1e-8, 1e-12, 1e-15]);
            let out = reeig_forward(&s, 1e-4).unwrap();
            let d = le_distance(&out, &SpdMatrix::identity(4)).unwrap();
            assert!(d.is_finite());
        }
    }

    #[test]
    fn stiefel_cases() {
        let mut r = rng(14);
        let w = BiMapWeight::random(&mut r, 6, 3);
        let same = stiefel_retract(&w, &DMatrix::zeros(6, 3), 0.1).unwrap();
        assert!((same.as_matrix() - w.as_matrix()).norm() <= 1e-12);

        for _ in 0..20 {
            let g = gaussian_matrix(&mut r, 6, 3) * 10.0;
            let next = stiefel_retract(&w, &g, 0.05).unwrap();
            assert!(orthogonality_drift(next.as_matrix()) <= 1e-10);
        }

        let v = BiMapWeight::random(&mut r, 5, 1);
        let radial = v.as_matrix() * 3.7;
        let next = stiefel_retract(&v, &radial, 0.5).unwrap();
        assert!((next.as_matrix() - v.as_matrix()).norm() <= 1e-12);

        assert!(stiefel_retract(&w, &DMatrix::zeros(5, 3), 0.1).is_err());
        assert!(matches!(qr_orthonormalize(&DMatrix::zeros(4, 2)), Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn stiefel_long_run_drift() {
        let mut r = rng(15);
        let mut w = BiMapWeight::random(&mut r, 8, 4);
        for _ in 0..10_000 {
            let g = gaussian_matrix(&mut r, 8, 4);
            w = stiefel_retract(&w, &g, 1e-2).unwrap();
        }
        assert!(orthogonality_drift(w.as_matrix()) <= 1e-8);
    }
}
