//! Log transform, standardization and the truncated SVD basis that maps
//! spectra to a handful of principal-component weights.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ScaleTag, Spectrum, SpectrumSet};

fn log_values(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(Error::domain(format!(
                    "log transform needs positive intensities, found {v}"
                )))
            }
        })
        .collect()
}

/// Elementwise natural log of a raw spectrum set.
pub fn log_transform(raw: &SpectrumSet) -> Result<SpectrumSet> {
    raw.expect_scale(ScaleTag::Raw)?;
    let values = log_values(raw.matrix().as_slice())?;
    let m = DMatrix::from_vec(raw.n_bins(), raw.n_runs(), values);
    raw.with_matrix(m, ScaleTag::Log)
}

pub fn log_transform_spectrum(raw: &Spectrum) -> Result<Spectrum> {
    raw.expect_scale(ScaleTag::Raw)?;
    Spectrum::new(raw.grid().clone(), log_values(raw.intensity())?, ScaleTag::Log)
}

/// Per-bin mean and a single scalar spread of the log training spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl StandardizationStats {
    pub fn new(mean: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::domain(format!("standardization scale must be positive, got {scale}")));
        }
        if mean.is_empty() {
            return Err(Error::domain("standardization mean is empty"));
        }
        Ok(Self { mean, scale })
    }

    pub fn n_bins(&self) -> usize {
        self.mean.len()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.mean.len() {
            return Err(Error::domain(format!(
                "spectrum has {n} bins, standardization expects {}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, log: &Spectrum) -> Result<Spectrum> {
        log.expect_scale(ScaleTag::Log)?;
        self.check_len(log.len())?;
        let v = log
            .intensity()
            .iter()
            .zip(&self.mean)
            .map(|(x, mu)| (x - mu) / self.scale)
            .collect();
        Spectrum::new(log.grid().clone(), v, ScaleTag::Standardized)
    }

    pub fn destandardize(&self, std: &Spectrum) -> Result<Spectrum> {
        std.expect_scale(ScaleTag::Standardized)?;
        self.check_len(std.len())?;
        Spectrum::new(std.grid().clone(), self.destandardize_values(std.intensity()), ScaleTag::Log)
    }

    pub(crate) fn destandardize_values(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.mean)
            .map(|(z, mu)| z * self.scale + mu)
            .collect()
    }

    pub fn standardize_set(&self, log: &SpectrumSet) -> Result<SpectrumSet> {
        log.expect_scale(ScaleTag::Log)?;
        self.check_len(log.n_bins())?;
        let mut m = log.matrix().clone();
        for mut col in m.column_iter_mut() {
            for (x, mu) in col.iter_mut().zip(&self.mean) {
                *x = (*x - mu) / self.scale;
            }
        }
        log.with_matrix(m, ScaleTag::Standardized)
    }

    pub fn destandardize_set(&self, std: &SpectrumSet) -> Result<SpectrumSet> {
        std.expect_scale(ScaleTag::Standardized)?;
        self.check_len(std.n_bins())?;
        let mut m = std.matrix().clone();
        for mut col in m.column_iter_mut() {
            for (z, mu) in col.iter_mut().zip(&self.mean) {
                *z = *z * self.scale + mu;
            }
        }
        std.with_matrix(m, ScaleTag::Log)
    }
}

/// Per-bin mean, and the population standard deviation of every entry of the
/// centered matrix.
pub fn fit_standardization(log: &SpectrumSet) -> Result<StandardizationStats> {
    log.expect_scale(ScaleTag::Log)?;
    let (n, m) = (log.n_bins(), log.n_runs());
    if m < 2 {
        return Err(Error::domain(format!(
            "standardization needs at least 2 runs, got {m}"
        )));
    }
    let x = log.matrix();
    let mean: Vec<f64> = (0..n).map(|i| x.row(i).sum() / m as f64).collect();
    let mut ss = 0.0;
    for col in x.column_iter() {
        for (v, mu) in col.iter().zip(&mean) {
            ss += (v - mu).powi(2);
        }
    }
    let scale = (ss / (n * m) as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::DegenerateData(
            "training spectra are identical after centering".into(),
        ));
    }
    StandardizationStats::new(mean, scale)
}

/// Truncated SVD basis `X = U S V^T = K W` with `K = U S / sqrt(m)` and
/// `W = sqrt(m) V^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    k: DMatrix<f64>,
    w: DMatrix<f64>,
    ktk_diag: Vec<f64>,
    singular_values: Vec<f64>,
    variance_explained: Vec<f64>,
}

impl Basis {
    /// Reassemble a basis from stored factors. `singular_values` is the full
    /// spectrum of the training matrix, of which `k` keeps the leading columns.
    pub fn from_parts(k: DMatrix<f64>, w: DMatrix<f64>, singular_values: Vec<f64>) -> Result<Self> {
        let q = k.ncols();
        if q == 0 || w.nrows() != q || singular_values.len() < q {
            return Err(Error::domain(format!(
                "inconsistent basis shapes: K {}x{}, W {}x{}, {} singular values",
                k.nrows(),
                k.ncols(),
                w.nrows(),
                w.ncols(),
                singular_values.len()
            )));
        }
        let ktk_diag: Vec<f64> = k.column_iter().map(|c| c.norm_squared()).collect();
        let total: f64 = singular_values.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        let variance_explained = singular_values
            .iter()
            .map(|s| {
                acc += s * s;
                if total > 0.0 {
                    acc / total
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            k,
            w,
            ktk_diag,
            singular_values,
            variance_explained,
        })
    }

    pub fn q(&self) -> usize {
        self.k.ncols()
    }

    pub fn n_bins(&self) -> usize {
        self.k.nrows()
    }

    pub fn n_runs(&self) -> usize {
        self.w.ncols()
    }

    /// `n_eta x q` basis vectors.
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// `q x m` training weights.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Diagonal of `K^T K`.
    pub fn ktk_diag(&self) -> &[f64] {
        &self.ktk_diag
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Cumulative fraction of variance captured by the first `i + 1` components.
    pub fn variance_explained(&self) -> &[f64] {
        &self.variance_explained
    }

    /// `K~ = (K^T K)^-1 K^T` as an explicit `q x n_eta` matrix.
    pub fn projector(&self) -> DMatrix<f64> {
        let mut p = self.k.transpose();
        for (mut row, d) in p.row_iter_mut().zip(&self.ktk_diag) {
            row /= *d;
        }
        p
    }

    /// `K w` on the standardized scale.
    pub fn combine(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.q() {
            return Err(Error::domain(format!(
                "expected {} weights, got {}",
                self.q(),
                weights.len()
            )));
        }
        Ok((&self.k * DVector::from_column_slice(weights)).data.into())
    }

    pub(crate) fn project_values(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_bins() {
            return Err(Error::domain(format!(
                "spectrum has {} bins, basis expects {}",
                y.len(),
                self.n_bins()
            )));
        }
        Ok(self
            .k
            .column_iter()
            .zip(&self.ktk_diag)
            .map(|(col, d)| col.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d)
            .collect())
    }
}

/// Thin SVD of the standardized training matrix truncated to `q` components.
///
/// Sign convention: the largest-magnitude entry of every basis vector is
/// positive, so identical inputs give identical stored bases.
pub fn build_basis(xstd: &SpectrumSet, q: usize) -> Result<Basis> {
    xstd.expect_scale(ScaleTag::Standardized)?;
    let (n, m) = (xstd.n_bins(), xstd.n_runs());
    let rank_max = n.min(m);
    if q == 0 || q > rank_max {
        return Err(Error::domain(format!(
            "q must lie in [1, {rank_max}], got {q}"
        )));
    }
    let svd = SVD::try_new(xstd.matrix().clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD returned no U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD returned no V^T".into()))?;
    let s = svd.singular_values;

    let sqrt_m = (m as f64).sqrt();
    let mut k = DMatrix::zeros(n, q);
    let mut w = DMatrix::zeros(q, m);
    for i in 0..q {
        let ui = u.column(i);
        let pivot = ui
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * s[i] / sqrt_m;
        for r in 0..n {
            k[(r, i)] = ui[r] * scale;
        }
        for c in 0..m {
            w[(i, c)] = sign * v_t[(i, c)] * sqrt_m;
        }
    }
    Basis::from_parts(k, w, s.iter().copied().collect())
}

/// Observed weights `w_obs = K~ y` of a standardized spectrum.
pub fn project(y: &Spectrum, basis: &Basis) -> Result<Vec<f64>> {
    y.expect_scale(ScaleTag::Standardized)?;
    basis.project_values(y.intensity())
}

/// Log-scale spectrum `destandardize(K w)`.
pub fn reconstruct(
    weights: &[f64],
    basis: &Basis,
    stats: &StandardizationStats,
    grid: &std::sync::Arc<crate::model::WavelengthGrid>,
) -> Result<Spectrum> {
    if stats.n_bins() != basis.n_bins() {
        return Err(Error::domain("basis and standardization disagree on bin count"));
    }
    let z = basis.combine(weights)?;
    Spectrum::new(grid.clone(), stats.destandardize_values(&z), ScaleTag::Log)
}
