//! Seeded generators for random SPD, symmetric and semi-orthogonal matrices.
//! Used by the gradient checker and the test suites.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::spd::{SpdMatrix, SymMatrix};

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Semi-orthogonal `rows×cols` matrix (`WᵀW = I`) from the QR of a Gaussian.
pub fn random_stiefel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    assert!(cols <= rows && cols > 0, "stiefel needs 0 < cols <= rows");
    loop {
        let g = gaussian_matrix(rng, rows, cols);
        let qr = g.qr();
        let r = qr.r();
        if (0..cols).any(|i| r[(i, i)].abs() < 1e-8) {
            continue;
        }
        let mut q = qr.q();
        for j in 0..cols {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        return q;
    }
}

/// Symmetric matrix with i.i.d. Gaussian entries of standard deviation `scale`.
pub fn random_sym<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> SymMatrix {
    SymMatrix::new(gaussian_matrix(rng, n, n) * scale).expect("finite")
}

/// SPD matrix with log-uniform spectrum in `[1, cond]` and random eigenvectors.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, cond: f64) -> SpdMatrix {
    let spectrum: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * cond.ln()).exp()).collect();
    spd_with_spectrum(rng, &spectrum)
}

/// SPD matrix `U diag(spectrum) Uᵀ` with Haar-random `U`.
pub fn spd_with_spectrum<R: Rng + ?Sized>(rng: &mut R, spectrum: &[f64]) -> SpdMatrix {
    let n = spectrum.len();
    let u = random_stiefel(rng, n, n);
    let mut scaled = u.clone();
    for (j, s) in spectrum.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    SpdMatrix::from_sym_unchecked(SymMatrix::from_matrix_unchecked(scaled * u.transpose()))
}
