//! Spectral calibration: recover plasma temperature, density and sodium
//! fraction from emission spectra through a reduced-basis Gaussian-process
//! emulator of a forward model and MCMC over the parameter cube.

pub mod calibration;
pub mod design;
pub mod emulator;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reduction;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};
