//! Shared domain types: unit-cube parameter points, their native-unit
//! counterparts, wavelength grids and spectrum containers.
//!
//! Parameters are always ordered (temperature, log10 density, sodium fraction).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of calibration parameters.
pub const PARAM_DIM: usize = 3;

/// Column names used wherever parameters are written out.
pub const PARAM_NAMES: [&str; PARAM_DIM] = ["t", "log10_rho", "na_frac"];

/// Native ranges `(low, high)` of temperature (eV), log10 mass density
/// (g/cm^3) and sodium fraction.
pub const NATIVE_RANGES: [(f64, f64); PARAM_DIM] = [(0.5, 1.5), (-7.0, -4.0), (0.0, 1.0)];

/// Index of the composition coordinate.
pub const SODIUM_INDEX: usize = 2;

/// A point in the unit cube `[0, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    coords: [f64; PARAM_DIM],
}

impl ParameterPoint {
    pub fn new(coords: [f64; PARAM_DIM]) -> Result<Self> {
        for (j, &c) in coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::domain(format!(
                    "coordinate {} ({}) = {c} lies outside [0, 1]",
                    j, PARAM_NAMES[j]
                )));
            }
        }
        Ok(Self { coords })
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        let coords: [f64; PARAM_DIM] = coords.try_into().map_err(|_| {
            Error::domain(format!(
                "expected {PARAM_DIM} coordinates, got {}",
                coords.len()
            ))
        })?;
        Self::new(coords)
    }

    pub fn coords(&self) -> &[f64; PARAM_DIM] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        PARAM_DIM
    }

    pub fn to_native(&self) -> NativeParameters {
        let native = |j: usize| {
            let (lo, hi) = NATIVE_RANGES[j];
            lo + self.coords[j] * (hi - lo)
        };
        NativeParameters {
            temperature_ev: native(0),
            log10_density_gcc: native(1),
            sodium_fraction: native(2),
        }
    }

    pub fn from_native(native: &NativeParameters) -> Result<Self> {
        native.validate()?;
        let values = native.as_array();
        let mut coords = [0.0; PARAM_DIM];
        for j in 0..PARAM_DIM {
            let (lo, hi) = NATIVE_RANGES[j];
            // clamp absorbs the last-ulp overshoot of the affine map at the bounds
            coords[j] = ((values[j] - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        Ok(Self { coords })
    }
}

/// Plasma parameters in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NativeParameters {
    pub temperature_ev: f64,
    pub log10_density_gcc: f64,
    pub sodium_fraction: f64,
}

impl NativeParameters {
    pub fn as_array(&self) -> [f64; PARAM_DIM] {
        [
            self.temperature_ev,
            self.log10_density_gcc,
            self.sodium_fraction,
        ]
    }

    pub fn copper_fraction(&self) -> f64 {
        1.0 - self.sodium_fraction
    }

    pub fn validate(&self) -> Result<()> {
        for (j, v) in self.as_array().into_iter().enumerate() {
            let (lo, hi) = NATIVE_RANGES[j];
            if !(lo..=hi).contains(&v) {
                return Err(Error::domain(format!(
                    "{} = {v} lies outside [{lo}, {hi}]",
                    PARAM_NAMES[j]
                )));
            }
        }
        Ok(())
    }
}

/// Map a unit-cube coordinate of parameter `j` to native units.
pub fn coordinate_to_native(j: usize, value: f64) -> f64 {
    let (lo, hi) = NATIVE_RANGES[j];
    lo + value * (hi - lo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    values: Vec<f64>,
}

impl WavelengthGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::domain("a wavelength grid needs at least 2 bins"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("wavelength grid contains non-finite values"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("wavelength grid must be strictly increasing"));
        }
        Ok(Self { values })
    }

    /// `bins` equally spaced wavelengths spanning `[min_nm, max_nm]` inclusive.
    pub fn uniform(min_nm: f64, max_nm: f64, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::domain("a wavelength grid needs at least 2 bins"));
        }
        let step = (max_nm - min_nm) / (bins - 1) as f64;
        Self::new((0..bins).map(|i| min_nm + step * i as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Which transform a spectrum's intensities are expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTag {
    Raw,
    Log,
    Standardized,
}

impl fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleTag::Raw => "raw",
            ScaleTag::Log => "log",
            ScaleTag::Standardized => "standardized",
        })
    }
}

fn check_raw_positive<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for &v in values {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::domain(format!(
                "raw intensities must be finite and strictly positive, found {v}"
            )));
        }
    }
    Ok(())
}

/// One spectrum on a shared wavelength grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    grid: Arc<WavelengthGrid>,
    intensity: Vec<f64>,
    scale: ScaleTag,
}

impl Spectrum {
    pub fn new(grid: Arc<WavelengthGrid>, intensity: Vec<f64>, scale: ScaleTag) -> Result<Self> {
        if intensity.len() != grid.len() {
            return Err(Error::domain(format!(
                "spectrum has {} bins but the grid has {}",
                intensity.len(),
                grid.len()
            )));
        }
        if scale == ScaleTag::Raw {
            check_raw_positive(&intensity)?;
        }
        Ok(Self {
            grid,
            intensity,
            scale,
        })
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.grid
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn into_intensity(self) -> Vec<f64> {
        self.intensity
    }

    pub fn scale(&self) -> ScaleTag {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub(crate) fn expect_scale(&self, expected: ScaleTag) -> Result<()> {
        if self.scale != expected {
            return Err(Error::scale(expected, self.scale));
        }
        Ok(())
    }
}

/// `m` spectra stored as the columns of an `n_eta x m` matrix, together with
/// the unit-cube inputs that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSet {
    grid: Arc<WavelengthGrid>,
    matrix: DMatrix<f64>,
    inputs: Vec<ParameterPoint>,
    scale: ScaleTag,
}

impl SpectrumSet {
    pub fn new(
        grid: Arc<WavelengthGrid>,
        matrix: DMatrix<f64>,
        inputs: Vec<ParameterPoint>,
        scale: ScaleTag,
    ) -> Result<Self> {
        if matrix.nrows() != grid.len() {
            return Err(Error::domain(format!(
                "matrix has {} rows but the grid has {} bins",
                matrix.nrows(),
                grid.len()
            )));
        }
        if matrix.ncols() != inputs.len() {
            return Err(Error::domain(format!(
                "matrix has {} columns but {} inputs were given",
                matrix.ncols(),
                inputs.len()
            )));
        }
        if scale == ScaleTag::Raw {
            check_raw_positive(matrix.iter())?;
        }
        Ok(Self {
            grid,
            matrix,
            inputs,
            scale,
        })
    }

    /// Stack spectra that share one grid and scale.
    pub fn from_spectra(spectra: &[Spectrum], inputs: Vec<ParameterPoint>) -> Result<Self> {
        let first = spectra
            .first()
            .ok_or_else(|| Error::domain("cannot build a spectrum set from zero spectra"))?;
        let grid = first.grid.clone();
        let scale = first.scale;
        for s in spectra {
            if s.grid != grid {
                return Err(Error::domain("spectra do not share a wavelength grid"));
            }
            s.expect_scale(scale)?;
        }
        let matrix = DMatrix::from_fn(grid.len(), spectra.len(), |i, j| spectra[j].intensity[i]);
        Self::new(grid, matrix, inputs, scale)
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.grid
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inputs(&self) -> &[ParameterPoint] {
        &self.inputs
    }

    pub fn scale(&self) -> ScaleTag {
        self.scale
    }

    pub fn n_bins(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_runs(&self) -> usize {
        self.matrix.ncols()
    }

    /// Column `i` as a standalone spectrum.
    pub fn spectrum(&self, i: usize) -> Spectrum {
        Spectrum {
            grid: self.grid.clone(),
            intensity: self.matrix.column(i).iter().copied().collect(),
            scale: self.scale,
        }
    }

    pub(crate) fn expect_scale(&self, expected: ScaleTag) -> Result<()> {
        if self.scale != expected {
            return Err(Error::scale(expected, self.scale));
        }
        Ok(())
    }

    /// CSV with a `wavelength` column followed by one `run_NNN` column per
    /// spectrum.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["wavelength".to_string()];
        header.extend((0..self.n_runs()).map(|k| format!("run_{k:03}")));
        w.write_record(&header)?;
        for (i, wl) in self.grid.values().iter().enumerate() {
            let mut row = Vec::with_capacity(self.n_runs() + 1);
            row.push(wl.to_string());
            row.extend(self.matrix.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Replace the matrix and scale tag, keeping grid and inputs.
    pub(crate) fn with_matrix(&self, matrix: DMatrix<f64>, scale: ScaleTag) -> Result<Self> {
        Self::new(self.grid.clone(), matrix, self.inputs.clone(), scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn native_corners_and_midpoint() {
        let lo = ParameterPoint::new([0.0; 3]).unwrap().to_native();
        assert_eq!(lo.as_array(), [0.5, -7.0, 0.0]);
        let hi = ParameterPoint::new([1.0; 3]).unwrap().to_native();
        assert_eq!(hi.as_array(), [1.5, -4.0, 1.0]);
        let mid = ParameterPoint::new([0.5; 3]).unwrap().to_native();
        assert_eq!(mid.as_array(), [1.0, -5.5, 0.5]);
    }

    #[test]
    fn from_native_inverts_known_points() {
        let mid = NativeParameters {
            temperature_ev: 1.0,
            log10_density_gcc: -5.5,
            sodium_fraction: 0.5,
        };
        assert_eq!(ParameterPoint::from_native(&mid).unwrap().coords(), &[0.5; 3]);
        let lo = NativeParameters {
            temperature_ev: 0.5,
            log10_density_gcc: -7.0,
            sodium_fraction: 0.0,
        };
        assert_eq!(ParameterPoint::from_native(&lo).unwrap().coords(), &[0.0; 3]);
    }

    #[test]
    fn out_of_range_inputs_are_domain_errors() {
        assert!(matches!(
            ParameterPoint::new([0.5, 1.2, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(ParameterPoint::new([f64::NAN, 0.5, 0.5]).is_err());
        let bad = NativeParameters {
            temperature_ev: 2.0,
            log10_density_gcc: -5.0,
            sodium_fraction: 0.5,
        };
        assert!(matches!(
            ParameterPoint::from_native(&bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grid_rejects_non_increasing() {
        assert!(WavelengthGrid::new(vec![1.0]).is_err());
        assert!(WavelengthGrid::new(vec![1.0, 1.0]).is_err());
        assert!(WavelengthGrid::new(vec![2.0, 1.0]).is_err());
        let g = WavelengthGrid::uniform(250.0, 900.0, 2048).unwrap();
        assert_eq!(g.len(), 2048);
        assert_eq!(g.min(), 250.0);
        assert!((g.max() - 900.0).abs() < 1e-9);
    }

    #[test]
    fn spectrum_rejects_length_mismatch_and_nonpositive_raw() {
        let g = Arc::new(WavelengthGrid::uniform(0.0, 1.0, 3).unwrap());
        assert!(Spectrum::new(g.clone(), vec![1.0, 2.0], ScaleTag::Raw).is_err());
        assert!(Spectrum::new(g.clone(), vec![1.0, 0.0, 2.0], ScaleTag::Raw).is_err());
        assert!(Spectrum::new(g.clone(), vec![1.0, -1.0, 2.0], ScaleTag::Log).is_ok());
    }

    #[test]
    fn spectrum_set_checks_columns_against_inputs() {
        let g = Arc::new(WavelengthGrid::uniform(0.0, 1.0, 3).unwrap());
        let p = ParameterPoint::new([0.5; 3]).unwrap();
        let m = DMatrix::from_element(3, 2, 1.0);
        assert!(SpectrumSet::new(g.clone(), m.clone(), vec![p], ScaleTag::Raw).is_err());
        assert!(SpectrumSet::new(g, m, vec![p, p], ScaleTag::Raw).is_ok());
    }

    proptest! {
        #[test]
        fn native_round_trip(a in 0.0..=1.0f64, b in 0.0..=1.0f64, c in 0.0..=1.0f64) {
            let t = ParameterPoint::new([a, b, c]).unwrap();
            let back = ParameterPoint::from_native(&t.to_native()).unwrap();
            for j in 0..3 {
                prop_assert!((back.coords()[j] - t.coords()[j]).abs() < 1e-12);
            }
            let n = t.to_native();
            let n2 = ParameterPoint::from_native(&n).unwrap().to_native();
            for (x, y) in n.as_array().iter().zip(n2.as_array()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
