#![allow(dead_code)]

use specal_core::design::{latin_hypercube, DesignKind};
use specal_core::emulator::{EmulatorBundle, MleOptions, Provenance};
use specal_core::model::SpectrumSet;
use specal_core::reduction::{build_basis, fit_standardization, log_transform};
use specal_core::surrogate::{Surrogate, SurrogateConfig};

pub fn small_surrogate(bins: usize) -> Surrogate {
    let mut cfg = SurrogateConfig::default();
    cfg.grid.bins = bins;
    Surrogate::new(cfg).unwrap()
}

/// Log training spectra from the surrogate on an `m`-point design.
pub fn training_log(m: usize, bins: usize, seed: u64) -> SpectrumSet {
    let design = latin_hypercube(m, 3, seed, DesignKind::Training).unwrap();
    log_transform(&small_surrogate(bins).simulate_batch(&design).unwrap()).unwrap()
}

/// A cheap emulator bundle on the surrogate.
pub fn small_bundle(m: usize, bins: usize, q: usize) -> EmulatorBundle {
    let log = training_log(m, bins, 7);
    let stats = fit_standardization(&log).unwrap();
    let basis = build_basis(&stats.standardize_set(&log).unwrap(), q).unwrap();
    let opts = MleOptions {
        starts: 3,
        ..Default::default()
    };
    EmulatorBundle::fit(log.inputs(), basis, stats, log.grid().clone(), &opts, Provenance::default()).unwrap()
}
