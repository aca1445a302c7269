//! Shared oracles for the integration suites: central finite differences
//! for gradient checks and a dense-Cholesky evidence computation for the
//! linear-Gaussian model. Both stay independent of the library's gradient
//! and ELBO code paths.

#![allow(dead_code)]

use mcbn::elbo::{IsotropicPrior, LinearGaussianModel};
use mcbn::matrix::Matrix;
use mcbn::rng::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient of a scalar function.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Elementwise relative error with a floor on the denominator, so
/// near-zero gradient entries are compared absolutely at `floor * tol`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.normal();
    }
    m
}

/// Negative log evidence of the linear-Gaussian model under the isotropic
/// prior, via the marginal covariance `sigma_n^2 I + sigma_p^2 X X^T` and a
/// Cholesky factorisation.
pub fn neg_log_evidence(model: &LinearGaussianModel, prior: &IsotropicPrior) -> f64 {
    let n = model.len();
    let sn2 = model.noise_sigma * model.noise_sigma;
    let sp2 = prior.sigma_p * prior.sigma_p;
    let cov = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        let dot: f64 = model
            .design
            .row(i)
            .iter()
            .zip(model.design.row(j))
            .map(|(&a, &b)| a * b)
            .sum();
        sp2 * dot + if i == j { sn2 } else { 0.0 }
    });
    let y = nalgebra::DVector::from_iterator(n, model.targets.iter().cloned());
    let chol = cov.cholesky().expect("marginal covariance is positive definite");
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let alpha = chol.solve(&y);
    0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + y.dot(&alpha))
}
