//! Exact linear-algebra identities of the reduced basis at full rank.

mod common;

use specal_core::reduction::{build_basis, fit_standardization, project, reconstruct};

#[test]
fn full_rank_basis_reproduces_training_data() {
    let log = common::training_log(120, 300, 3);
    let stats = fit_standardization(&log).unwrap();
    let z = stats.standardize_set(&log).unwrap();
    let basis = build_basis(&z, 120).unwrap();

    let kw = basis.k() * basis.w();
    let err = (kw - z.matrix()).amax();
    assert!(err < 1e-8, "max |KW - X| = {err:e}");

    // Directions beyond the numerical rank carry arbitrary singular vectors,
    // so the centring identities hold only within it.
    let s0 = basis.singular_values()[0];
    let rank = basis.singular_values().iter().filter(|&&s| s > 1e-8 * s0).count();
    assert!(rank >= 10, "numerical rank {rank}");
    for i in 0..rank {
        let row_sum: f64 = basis.w().row(i).iter().sum();
        assert!(row_sum.abs() < 1e-6, "row {i} of W sums to {row_sum:e}");
    }

    // The projector inverts K on the directions the data actually spans.
    let pk = basis.projector() * basis.k();
    for i in 0..rank {
        for j in 0..rank {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((pk[(i, j)] - expect).abs() < 1e-8, "({i},{j}) = {}", pk[(i, j)]);
        }
    }
}

#[test]
fn projection_and_reconstruction_round_trip_at_training_runs() {
    let log = common::training_log(80, 200, 4);
    let stats = fit_standardization(&log).unwrap();
    let z = stats.standardize_set(&log).unwrap();
    let basis = build_basis(&z, 80).unwrap();
    for r in [0, 17, 79] {
        let w = project(&z.spectrum(r), &basis).unwrap();
        for (i, wi) in w.iter().enumerate().take(10) {
            assert!((wi - basis.w()[(i, r)]).abs() < 1e-8);
        }
        let back = reconstruct(&w, &basis, &stats, log.grid()).unwrap();
        let orig = log.spectrum(r);
        for (a, b) in back.intensity().iter().zip(orig.intensity()) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
    }
}
