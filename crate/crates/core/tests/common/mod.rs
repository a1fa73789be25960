//! Shared oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use padis::grid::CanvasLayout;
use padis::operators::LinearOperator;
use padis::scoremodel::GaussianPrior;
use padis::{Image, Shape};
use rand::Rng;

/// Independent-pixel Gaussian prior on a padded canvas: random means and
/// variances inside, a deterministic zero frame outside.
pub fn framed_gaussian(layout: &CanvasLayout, rng: &mut impl Rng) -> GaussianPrior {
    let side = layout.canvas_side();
    let pad = layout.pad();
    let n = layout.n();
    let inside = |r: usize, c: usize| r >= pad && r < pad + n && c >= pad && c < pad + n;
    let mut mean = Image::zeros(Shape::square(side, 1));
    let mut var = Image::zeros(Shape::square(side, 1));
    for r in 0..side {
        for c in 0..side {
            if inside(r, c) {
                mean.set(0, r, c, rng.gen_range(0.3..0.7));
                var.set(0, r, c, rng.gen_range(0.01..0.05));
            }
        }
    }
    GaussianPrior::new(mean, var).unwrap()
}

/// Dense matrix of a linear operator, one column per basis image.
pub fn dense(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (ins, outs) = (op.input_shape(), op.output_shape());
    let mut m = DMatrix::zeros(outs.len(), ins.len());
    for j in 0..ins.len() {
        let mut e = Image::zeros(ins);
        e.data_mut()[j] = 1.0;
        let col = op.apply(&e).unwrap();
        for (i, v) in col.data().iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

/// Mean of `N(mu, diag(var))` conditioned on `A x = y` (noiseless), or on
/// `y = A x + n` with `n ~ N(0, noise_var I)`.
pub fn gaussian_posterior_mean(
    mu: &[f64],
    var: &[f64],
    a: &DMatrix<f64>,
    y: &[f64],
    noise_var: f64,
) -> Vec<f64> {
    let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(var));
    let mu = DVector::from_column_slice(mu);
    let y = DVector::from_column_slice(y);
    let gram = a * &sigma * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * noise_var;
    let resid = y - a * &mu;
    let solved = gram.lu().solve(&resid).expect("measurement covariance is invertible");
    (mu + sigma * a.transpose() * solved).as_slice().to_vec()
}
