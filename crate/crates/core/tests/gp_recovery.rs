//! Hyperparameter recovery on draws from a known Gaussian process prior.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use specal_core::emulator::{correlation_matrix, fit_mle, MleOptions};
use specal_core::rng::{derive_seed, seeded};

const TRUE_LENGTH: f64 = 0.3;

/// `m` uniform inputs and one exact draw from a zero-mean, unit-variance GP
/// with isotropic length scale 0.3.
fn prior_draw(m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seeded(seed);
    let inputs: Vec<f64> = (0..m * 3).map(|_| rng.random()).collect();
    let r = correlation_matrix(&inputs, 3, &[TRUE_LENGTH; 3], 1e-10);
    let l = r.cholesky().expect("prior correlation is positive definite").unpack();
    let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
    (inputs, (l * z).as_slice().to_vec())
}

#[test]
fn length_scales_recovered_within_factor_two() {
    let mut successes = 0;
    for rep in 0..10 {
        let (x, w) = prior_draw(200, derive_seed(2024, rep));
        let opts = MleOptions {
            seed: derive_seed(77, rep),
            ..Default::default()
        };
        let hp = fit_mle(&x, 3, &w, &opts).unwrap();
        let ok = hp
            .length_scales
            .iter()
            .all(|&l| l > TRUE_LENGTH / 2.0 && l < TRUE_LENGTH * 2.0);
        if ok {
            successes += 1;
        }
    }
    assert!(successes >= 9, "only {successes}/10 repetitions recovered the length scales");
}
