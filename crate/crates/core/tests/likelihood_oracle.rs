//! The diagonal likelihood against a dense multivariate normal evaluation.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use specal_core::calibration::CalibrationProblem;
use specal_core::model::ParameterPoint;
use specal_core::rng::seeded;

/// Dense Gaussian log density with covariance `(lambda K^T K)^-1 + diag(v)`,
/// built without assuming `K^T K` is diagonal.
fn dense_log_density(k: &DMatrix<f64>, lambda: f64, w_obs: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let q = w_obs.len();
    let ktk = k.transpose() * k;
    let mut cov = (ktk * lambda).try_inverse().unwrap();
    for i in 0..q {
        cov[(i, i)] += var[i];
    }
    let chol = cov.cholesky().unwrap();
    let r = DVector::from_iterator(q, w_obs.iter().zip(mean).map(|(w, m)| w - m));
    let z = chol.solve(&r);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&z))
}

#[test]
fn diagonal_likelihood_matches_dense_evaluation() {
    let bundle = common::small_bundle(60, 256, 6);
    let mut rng = seeded(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = ParameterPoint::new([rng.random(), rng.random(), rng.random()]).unwrap();
        let w_obs: Vec<f64> = (0..bundle.q()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda = rng.random_range(0.5..10.0);
        let problem = CalibrationProblem::new(&bundle, w_obs.clone(), lambda).unwrap();
        let fast = problem.log_likelihood(&theta).unwrap();
        let pred = bundle.predict_weights(&theta);
        let dense = dense_log_density(bundle.basis().k(), lambda, &w_obs, &pred.mean, &pred.variance);
        worst = worst.max((fast - dense).abs());
    }
    assert!(worst < 1e-8, "max |diagonal - dense| = {worst:e}");
}
