//! Small dense building blocks shared by the graph path and the model heads.

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};

/// `y = x·w + b`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Tape handles for an [`Affine`].
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

/// Uniform in `[-bound, bound]`.
pub fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

impl Affine {
    pub fn new(w: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if b.shape() != (1, w.ncols()) {
            return Err(invalid(format!(
                "affine bias must be 1x{}, got {}x{}",
                w.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { w, b })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: DMatrix::zeros(input, output),
            b: DMatrix::zeros(1, output),
        }
    }

    /// Fan-in scaled uniform initialization.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: uniform_matrix(rng, input, output, bound),
            b: uniform_matrix(rng, 1, output, bound),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.w.nrows() {
            return Err(invalid(format!(
                "affine: input has {} columns, expected {}",
                x.ncols(),
                self.w.nrows()
            )));
        }
        let mut y = x * &self.w;
        for mut row in y.row_iter_mut() {
            row += &self.b;
        }
        Ok(y)
    }

    pub fn record(&self, tape: &mut Tape) -> AffineVars {
        AffineVars {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

impl AffineVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.w, Some(self.b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_tape() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Affine::init(&mut r, 3, 2);
        let x = uniform_matrix(&mut r, 4, 3, 1.0);
        let mut t = Tape::new();
        let vars = a.record(&mut t);
        let xv = t.constant(x.clone());
        let y = vars.apply(&mut t, xv).unwrap();
        assert_eq!(t.value(y), &a.forward(&x).unwrap());
        assert!(a.forward(&DMatrix::zeros(1, 2)).is_err());
        assert!(Affine::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).is_err());
    }
}
