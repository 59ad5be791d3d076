//! Analytic stand-in for a plasma emission code.
//!
//! A spectrum is a smooth continuum plus Gaussian emission lines of sodium and
//! copper:
//!
//! ```text
//! I(l) = B(l; T, rho) + L * sum_e A_e(T, rho, c) sum_k s_ek exp(-E_ek / T) G(l - l_ek; w(rho))
//!
//! B       = b0 * exp(T / T0) * (1 + b1 * x(l)) * h(rho)
//! A_Na    = c * (1 + gamma * (1 - c)) * h(rho)
//! A_Cu    = (1 - c) * h(rho)
//! h(rho)  = (rho / rho_ref)^a
//! w(rho)  = w0 * (rho / rho_ref)^beta
//! ```
//!
//! `G` is a unit-area Gaussian and `x(l)` the wavelength rescaled to `[0, 1]`.
//! The `gamma` term brightens sodium lines when copper is present, which is the
//! nonlinear composition dependence the calibration has to cope with.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::model::{NativeParameters, ScaleTag, Spectrum, SpectrumSet, WavelengthGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Element {
    Sodium,
    Copper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionLine {
    pub center_nm: f64,
    pub strength: f64,
    pub upper_energy_ev: f64,
}

impl EmissionLine {
    fn new(center_nm: f64, strength: f64, upper_energy_ev: f64) -> Self {
        Self {
            center_nm,
            strength,
            upper_energy_ev,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineList {
    pub sodium: Vec<EmissionLine>,
    pub copper: Vec<EmissionLine>,
}

impl Default for LineList {
    fn default() -> Self {
        Self {
            sodium: vec![
                EmissionLine::new(589.0, 1.0, 2.10),
                EmissionLine::new(589.6, 0.5, 2.10),
                EmissionLine::new(819.5, 0.4, 3.62),
            ],
            copper: vec![
                EmissionLine::new(324.8, 1.0, 3.82),
                EmissionLine::new(327.4, 0.5, 3.79),
                EmissionLine::new(521.8, 0.6, 6.19),
            ],
        }
    }
}

impl LineList {
    pub fn lines(&self, element: Element) -> &[EmissionLine] {
        match element {
            Element::Sodium => &self.sodium,
            Element::Copper => &self.copper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_nm: f64,
    pub max_nm: f64,
    pub bins: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min_nm: 250.0,
            max_nm: 900.0,
            bins: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub line_list: LineList,
    /// Sodium brightening per unit copper fraction (`gamma`).
    pub matrix_gain: f64,
    /// Line width at the reference density (`w0`, nm).
    pub base_width_nm: f64,
    /// Density exponent of the line width (`beta`).
    pub broadening_exponent: f64,
    /// Density exponent of the emission scaling `h` (`a`).
    pub density_exponent: f64,
    pub reference_log10_density: f64,
    /// Overall line amplitude (`L`).
    pub line_scale: f64,
    /// Continuum amplitude (`b0`).
    pub continuum_amplitude: f64,
    /// Continuum temperature scale (`T0`, eV).
    pub continuum_temperature_ev: f64,
    /// Linear continuum slope across the grid (`b1`).
    pub continuum_slope: f64,
    pub grid: GridSpec,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            line_list: LineList::default(),
            matrix_gain: 2.0,
            base_width_nm: 1.0,
            broadening_exponent: 0.25,
            density_exponent: 1.0,
            reference_log10_density: -5.5,
            line_scale: 1.5e11,
            continuum_amplitude: 1.0e6,
            continuum_temperature_ev: 0.25,
            continuum_slope: 1.0,
            grid: GridSpec::default(),
        }
    }
}

impl SurrogateConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.matrix_gain >= 0.0 && self.matrix_gain.is_finite()) {
            return Err(Error::domain("matrix_gain must be non-negative"));
        }
        positive("base_width_nm", self.base_width_nm)?;
        positive("line_scale", self.line_scale)?;
        positive("continuum_amplitude", self.continuum_amplitude)?;
        positive("continuum_temperature_ev", self.continuum_temperature_ev)?;
        if self.continuum_slope <= -1.0 {
            return Err(Error::domain("continuum_slope must exceed -1"));
        }
        if !(self.grid.min_nm < self.grid.max_nm) || self.grid.bins < 2 {
            return Err(Error::domain("invalid wavelength grid specification"));
        }
        for line in self.line_list.sodium.iter().chain(&self.line_list.copper) {
            positive("line strength", line.strength)?;
            positive("line upper energy", line.upper_energy_ev)?;
            if !(self.grid.min_nm..=self.grid.max_nm).contains(&line.center_nm) {
                return Err(Error::domain(format!(
                    "line at {} nm lies outside the grid span",
                    line.center_nm
                )));
            }
        }
        Ok(())
    }
}

/// Sodium line amplitude per unit `h(rho)`.
pub fn sodium_amplitude(sodium_fraction: f64, matrix_gain: f64) -> f64 {
    sodium_fraction * (1.0 + matrix_gain * (1.0 - sodium_fraction))
}

/// Copper line amplitude per unit `h(rho)`.
pub fn copper_amplitude(sodium_fraction: f64) -> f64 {
    1.0 - sodium_fraction
}

/// A validated surrogate with its wavelength grid materialised.
#[derive(Clone, Debug)]
pub struct Surrogate {
    config: SurrogateConfig,
    grid: Arc<WavelengthGrid>,
}

impl Surrogate {
    pub fn new(config: SurrogateConfig) -> Result<Self> {
        config.validate()?;
        let grid = WavelengthGrid::uniform(config.grid.min_nm, config.grid.max_nm, config.grid.bins)?;
        Ok(Self {
            config,
            grid: Arc::new(grid),
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.grid
    }

    fn density_ratio(&self, n: &NativeParameters) -> f64 {
        10f64.powf(n.log10_density_gcc - self.config.reference_log10_density)
    }

    fn emission_scale(&self, n: &NativeParameters) -> f64 {
        self.density_ratio(n).powf(self.config.density_exponent)
    }

    pub fn line_width(&self, n: &NativeParameters) -> f64 {
        self.config.base_width_nm * self.density_ratio(n).powf(self.config.broadening_exponent)
    }

    pub fn continuum(&self, n: &NativeParameters) -> Vec<f64> {
        let c = &self.config;
        let level = c.continuum_amplitude
            * (n.temperature_ev / c.continuum_temperature_ev).exp()
            * self.emission_scale(n);
        let (lo, span) = (self.grid.min(), self.grid.max() - self.grid.min());
        self.grid
            .values()
            .iter()
            .map(|&l| level * (1.0 + c.continuum_slope * (l - lo) / span))
            .collect()
    }

    /// Line emission of one element, without the continuum.
    pub fn line_emission(&self, n: &NativeParameters, element: Element) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        self.add_lines(n, element, &mut out);
        out
    }

    fn add_lines(&self, n: &NativeParameters, element: Element, out: &mut [f64]) {
        let c = &self.config;
        let amplitude = match element {
            Element::Sodium => sodium_amplitude(n.sodium_fraction, c.matrix_gain),
            Element::Copper => copper_amplitude(n.sodium_fraction),
        } * self.emission_scale(n)
            * c.line_scale;
        if amplitude == 0.0 {
            return;
        }
        let width = self.line_width(n);
        let norm = 1.0 / (width * (2.0 * std::f64::consts::PI).sqrt());
        let inv_two_w2 = 1.0 / (2.0 * width * width);
        for line in c.line_list.lines(element) {
            let peak = amplitude
                * line.strength
                * (-line.upper_energy_ev / n.temperature_ev).exp()
                * norm;
            for (o, &l) in out.iter_mut().zip(self.grid.values()) {
                let d = l - line.center_nm;
                *o += peak * (-d * d * inv_two_w2).exp();
            }
        }
    }

    /// Raw-scale spectrum for one parameter setting.
    pub fn simulate(&self, n: &NativeParameters) -> Result<Spectrum> {
        n.validate()?;
        let mut intensity = self.continuum(n);
        self.add_lines(n, Element::Sodium, &mut intensity);
        self.add_lines(n, Element::Copper, &mut intensity);
        Spectrum::new(self.grid.clone(), intensity, ScaleTag::Raw)
    }

    /// One raw spectrum per design point, in design order.
    pub fn simulate_batch(&self, design: &Design) -> Result<SpectrumSet> {
        let inputs = design.parameter_points()?;
        let columns: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|t| self.simulate(&t.to_native()).map(Spectrum::into_intensity))
            .collect::<Result<_>>()?;
        let n = self.grid.len();
        let matrix = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        SpectrumSet::new(self.grid.clone(), matrix, inputs, ScaleTag::Raw)
    }
}

/// Observation noise `N(0, 1/precision)` per bin on the standardized scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub precision: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(precision: f64, seed: u64) -> Result<Self> {
        if !(precision > 0.0) {
            return Err(Error::domain(format!(
                "noise precision must be positive, got {precision}"
            )));
        }
        Ok(Self { precision, seed })
    }

    pub fn std_dev(&self) -> f64 {
        1.0 / self.precision.sqrt()
    }
}

pub fn add_noise(spectrum: &Spectrum, noise: &NoiseModel) -> Result<Spectrum> {
    spectrum.expect_scale(ScaleTag::Standardized)?;
    let noise = NoiseModel::new(noise.precision, noise.seed)?;
    let sd = noise.std_dev();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let values = spectrum
        .intensity()
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + sd * z
        })
        .collect();
    Spectrum::new(spectrum.grid().clone(), values, ScaleTag::Standardized)
}
