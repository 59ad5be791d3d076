//! Independent zero-mean Gaussian processes over the principal-component
//! weight surfaces.
//!
//! Each weight `w_i(t)` has prior `N(0, s2_i (R_i + nugget I))` with a product
//! squared-exponential correlation. Hyperparameters are fixed by maximum
//! likelihood before calibration and never revisited afterwards.

use std::collections::BTreeMap;
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::{cholesky_in_place, cholesky_in_place_scratch};
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, Par};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParameterPoint, ScaleTag, Spectrum, WavelengthGrid, PARAM_DIM};
use crate::optim::{nelder_mead, SimplexOptions};
use crate::reduction::{Basis, StandardizationStats};
use crate::rng::{derive_seed, seeded};

pub const DEFAULT_NUGGET: f64 = 1e-8;

/// Number of points per batched prediction.
pub const PREDICT_BLOCK: usize = 16;

/// Length scales are searched in `[MIN_LENGTH, MAX_LENGTH]`.
const MIN_LENGTH: f64 = 1e-3;
const MAX_LENGTH: f64 = 1e2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub length_scales: Vec<f64>,
    pub marginal_variance: f64,
    pub nugget: f64,
}

impl GpHyperParams {
    pub fn validate(&self) -> Result<()> {
        check_lengths(&self.length_scales)?;
        if !(self.marginal_variance > 0.0 && self.marginal_variance.is_finite()) {
            return Err(Error::domain(format!(
                "marginal variance must be positive, got {}",
                self.marginal_variance
            )));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::domain(format!("nugget must be non-negative, got {}", self.nugget)));
        }
        Ok(())
    }
}

fn check_lengths(lengths: &[f64]) -> Result<()> {
    if lengths.is_empty() || lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::domain(format!(
            "length scales must be positive, got {lengths:?}"
        )));
    }
    Ok(())
}

/// `prod_j exp(-(a_j - b_j)^2 / (2 l_j^2))`
pub fn correlation(a: &[f64], b: &[f64], lengths: &[f64]) -> Result<f64> {
    check_lengths(lengths)?;
    if a.len() != lengths.len() || b.len() != lengths.len() {
        return Err(Error::domain("point and length-scale dimensions differ"));
    }
    Ok(correlation_unchecked(a, b, lengths))
}

fn correlation_unchecked(a: &[f64], b: &[f64], lengths: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(lengths) {
        let d = x - y;
        s += d * d / (2.0 * l * l);
    }
    (-s).exp()
}

/// `R + nugget I` for row-major `m x p` inputs.
pub fn correlation_matrix(inputs: &[f64], p: usize, lengths: &[f64], nugget: f64) -> DMatrix<f64> {
    let m = inputs.len() / p;
    let mut r = DMatrix::zeros(m, m);
    for i in 0..m {
        let a = &inputs[i * p..(i + 1) * p];
        r[(i, i)] = 1.0 + nugget;
        for j in 0..i {
            let v = correlation_unchecked(a, &inputs[j * p..(j + 1) * p], lengths);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

fn check_training(inputs: &[f64], p: usize, weights: &[f64]) -> Result<usize> {
    if p == 0 || inputs.len() % p != 0 {
        return Err(Error::domain("training inputs do not split into points"));
    }
    let m = inputs.len() / p;
    if weights.len() != m {
        return Err(Error::domain(format!(
            "{} training weights for {m} training inputs",
            weights.len()
        )));
    }
    Ok(m)
}

/// Lower triangle (and diagonal) of `R + nugget I`.
fn lower_correlation(inputs: &[f64], p: usize, lengths: &[f64], nugget: f64) -> Mat<f64> {
    let m = inputs.len() / p;
    let mut a = Mat::zeros(m, m);
    for j in 0..m {
        let b = &inputs[j * p..(j + 1) * p];
        a[(j, j)] = 1.0 + nugget;
        for i in j + 1..m {
            a[(i, j)] = correlation_unchecked(&inputs[i * p..(i + 1) * p], b, lengths);
        }
    }
    a
}

/// Lower Cholesky factor (upper triangle zeroed), or `None` if `a` is not
/// numerically positive definite. Runs single-threaded so the result does
/// not depend on the size of the worker pool.
fn cholesky_lower(mut a: Mat<f64>) -> Option<Mat<f64>> {
    let n = a.nrows();
    let mut mem = MemBuffer::new(cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default()));
    cholesky_in_place(
        a.as_mut(),
        Default::default(),
        Par::Seq,
        MemStack::new(&mut mem),
        Default::default(),
    )
    .ok()?;
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    Some(a)
}

/// Cholesky factor, log determinant and `A^-1 w` of `A = R + nugget I`.
struct Factored {
    l: Mat<f64>,
    log_det: f64,
    alpha: Vec<f64>,
}

fn factor(inputs: &[f64], p: usize, weights: &[f64], lengths: &[f64], nugget: f64) -> Option<Factored> {
    let l = cholesky_lower(lower_correlation(inputs, p, lengths, nugget))?;
    let m = l.nrows();
    let log_det = 2.0 * (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
    let mut rhs = Mat::from_fn(m, 1, |i, _| weights[i]);
    solve_lower_triangular_in_place(l.as_ref(), rhs.as_mut(), Par::Seq);
    solve_upper_triangular_in_place(l.transpose(), rhs.as_mut(), Par::Seq);
    let alpha = (0..m).map(|i| rhs[(i, 0)]).collect();
    Some(Factored { l, log_det, alpha })
}

/// Profiled log marginal likelihood at the given length scales, with the
/// marginal variance replaced by its closed-form optimum `w^T A^-1 w / m`.
pub fn profiled_log_likelihood(
    inputs: &[f64],
    p: usize,
    weights: &[f64],
    lengths: &[f64],
    nugget: f64,
) -> Result<f64> {
    check_lengths(lengths)?;
    let m = check_training(inputs, p, weights)? as f64;
    let f = factor(inputs, p, weights, lengths, nugget).ok_or_else(|| {
        Error::Numerical(format!(
            "correlation matrix is not positive definite at length scales {lengths:?} (nugget {nugget})"
        ))
    })?;
    let quad: f64 = weights.iter().zip(&f.alpha).map(|(w, a)| w * a).sum();
    let s2 = quad / m;
    Ok(-0.5 * m * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * f.log_det - 0.5 * m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub starts: usize,
    pub seed: u64,
    pub nugget: f64,
    /// Simplex budget for each start.
    pub evals_per_start: usize,
    /// Extra budget spent refining the best start.
    pub polish_evals: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 0,
            nugget: DEFAULT_NUGGET,
            evals_per_start: 60,
            polish_evals: 150,
        }
    }
}

/// Maximum-likelihood hyperparameters for one weight surface.
///
/// Length scales are searched on a log scale by Nelder-Mead from `starts`
/// log-spaced initial values in `[0.05, 5]` (per-dimension jitter drawn from
/// `seed`); the marginal variance is profiled out.
pub fn fit_mle(inputs: &[f64], p: usize, weights: &[f64], opts: &MleOptions) -> Result<GpHyperParams> {
    let m = check_training(inputs, p, weights)?;
    if m < p + 2 {
        return Err(Error::domain(format!(
            "MLE needs at least p + 2 = {} training points, got {m}",
            p + 2
        )));
    }
    if opts.starts == 0 {
        return Err(Error::domain("MLE needs at least one start"));
    }
    if weights.iter().all(|&w| w == weights[0]) {
        return Err(Error::DegenerateData(
            "all training weights are equal; length scales are not identifiable".into(),
        ));
    }

    // Work on unit-RMS weights: the optimisation path then depends only on
    // the shape of the data, and the variance is rescaled at the end.
    let rms = (weights.iter().map(|w| w * w).sum::<f64>() / m as f64).sqrt();
    let unit: Vec<f64> = weights.iter().map(|w| w / rms).collect();

    let (lo, hi) = (MIN_LENGTH.ln(), MAX_LENGTH.ln());
    let objective = |log_l: &[f64]| -> f64 {
        if log_l.iter().any(|v| !(lo..=hi).contains(v)) {
            return f64::INFINITY;
        }
        let lengths: Vec<f64> = log_l.iter().map(|v| v.exp()).collect();
        match factor(inputs, p, &unit, &lengths, opts.nugget) {
            Some(f) => {
                let quad: f64 = unit.iter().zip(&f.alpha).map(|(w, a)| w * a).sum();
                if quad > 0.0 {
                    0.5 * m as f64 * quad.ln() + 0.5 * f.log_det
                } else {
                    f64::INFINITY
                }
            }
            None => f64::INFINITY,
        }
    };

    let mut rng = seeded(opts.seed);
    let (first, last) = (0.05f64.ln(), 5.0f64.ln());
    let mut best: Option<(Vec<f64>, f64)> = None;
    let simplex = SimplexOptions {
        step: 0.5,
        max_evals: opts.evals_per_start,
        f_tol: 1e-7,
        x_tol: 1e-3,
    };
    for k in 0..opts.starts {
        let frac = if opts.starts > 1 {
            k as f64 / (opts.starts - 1) as f64
        } else {
            0.5
        };
        let base = first + frac * (last - first);
        let x0: Vec<f64> = (0..p).map(|_| base + 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let found = nelder_mead(objective, &x0, &simplex);
        if found.value.is_finite() && best.as_ref().is_none_or(|b| found.value < b.1) {
            best = Some((found.x, found.value));
        }
    }
    let (x_best, _) = best.ok_or_else(|| {
        Error::Numerical(format!(
            "no length scales gave a positive-definite correlation matrix (nugget {})",
            opts.nugget
        ))
    })?;
    let polish = SimplexOptions {
        step: 0.1,
        max_evals: opts.polish_evals,
        f_tol: 1e-9,
        x_tol: 1e-4,
    };
    let refined = nelder_mead(objective, &x_best, &polish);
    let lengths: Vec<f64> = refined.x.iter().map(|v| v.exp()).collect();

    let f = factor(inputs, p, &unit, &lengths, opts.nugget)
        .ok_or_else(|| Error::Numerical("refit at the optimum failed".into()))?;
    let quad: f64 = unit.iter().zip(&f.alpha).map(|(w, a)| w * a).sum();
    let marginal_variance = quad / m as f64 * (rms * rms);
    Ok(GpHyperParams {
        length_scales: lengths,
        marginal_variance,
        nugget: opts.nugget,
    })
}

/// A fitted GP for one weight, with its factorisation cached for prediction.
#[derive(Clone, Debug)]
pub struct WeightEmulator {
    index: usize,
    hyper: GpHyperParams,
    dim: usize,
    inputs: Vec<f64>,
    weights: Vec<f64>,
    /// Lower Cholesky factor of `R + nugget I`.
    chol_l: Mat<f64>,
    /// `(R + nugget I)^-1 w`
    alpha: Vec<f64>,
    inv_two_l2: Vec<f64>,
}

impl WeightEmulator {
    pub fn new(index: usize, inputs: &[f64], p: usize, weights: &[f64], hyper: GpHyperParams) -> Result<Self> {
        hyper.validate()?;
        check_training(inputs, p, weights)?;
        if hyper.length_scales.len() != p {
            return Err(Error::domain(format!(
                "{} length scales for {p} input dimensions",
                hyper.length_scales.len()
            )));
        }
        let f = factor(inputs, p, weights, &hyper.length_scales, hyper.nugget).ok_or_else(|| {
            Error::Numerical(format!(
                "weight {index}: correlation matrix is not positive definite at length scales {:?} (nugget {})",
                hyper.length_scales, hyper.nugget
            ))
        })?;
        let inv_two_l2 = hyper.length_scales.iter().map(|l| 1.0 / (2.0 * l * l)).collect();
        Ok(Self {
            index,
            dim: p,
            inputs: inputs.to_vec(),
            weights: weights.to_vec(),
            chol_l: f.l,
            alpha: f.alpha,
            inv_two_l2,
            hyper,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn hyper(&self) -> &GpHyperParams {
        &self.hyper
    }

    pub fn training_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn training_inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn n_train(&self) -> usize {
        self.weights.len()
    }

    /// `(R + nugget I)^-1 w`
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Correlations between `x` and every training input.
    pub fn correlations(&self, x: &[f64]) -> Vec<f64> {
        self.inputs
            .chunks_exact(self.dim)
            .map(|t| {
                let mut s = 0.0;
                for ((a, b), c) in t.iter().zip(x).zip(&self.inv_two_l2) {
                    let d = a - b;
                    s += d * d * c;
                }
                (-s).exp()
            })
            .collect()
    }

    /// Predictive mean and variance at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dim {
            return Err(Error::domain(format!(
                "prediction point has {} coordinates, emulator expects {}",
                x.len(),
                self.dim
            )));
        }
        let r = self.correlations(x);
        let m = r.len();
        let (mean, var) = self.predict_columns(Mat::from_fn(m, 1, |k, _| r[k]));
        Ok((mean[0], var[0]))
    }

    /// Means and variances for the correlation vectors stored as the
    /// columns of `r`.
    fn predict_columns(&self, mut r: Mat<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = r.ncols();
        let mean: Vec<f64> = (0..n)
            .map(|c| {
                let col = r.col(c);
                (0..self.alpha.len()).map(|k| col[k] * self.alpha[k]).sum()
            })
            .collect();
        solve_lower_triangular_in_place(self.chol_l.as_ref(), r.as_mut(), Par::Seq);
        let s2 = self.hyper.marginal_variance;
        let variance = (0..n)
            .map(|c| {
                let col = r.col(c);
                let explained: f64 = (0..col.nrows()).map(|k| col[k] * col[k]).sum();
                s2 * (1.0 - explained).max(0.0) + s2 * self.hyper.nugget
            })
            .collect();
        (mean, variance)
    }
}

/// GP predictions for all `q` weights at one parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

/// The complete emulator: `q` weight GPs plus the basis and standardization
/// needed to turn weights back into spectra.
#[derive(Clone, Debug)]
pub struct EmulatorBundle {
    emulators: Vec<WeightEmulator>,
    basis: Basis,
    stats: StandardizationStats,
    grid: Arc<WavelengthGrid>,
    provenance: Provenance,
}

impl EmulatorBundle {
    /// Assemble from already-estimated hyperparameters (one per basis weight).
    pub fn from_hyperparameters(
        training_inputs: &[ParameterPoint],
        basis: Basis,
        stats: StandardizationStats,
        grid: Arc<WavelengthGrid>,
        hypers: Vec<GpHyperParams>,
        provenance: Provenance,
    ) -> Result<Self> {
        if hypers.len() != basis.q() {
            return Err(Error::domain(format!(
                "{} hyperparameter sets for a rank-{} basis",
                hypers.len(),
                basis.q()
            )));
        }
        if training_inputs.len() != basis.n_runs() {
            return Err(Error::domain("training inputs and basis weights disagree in count"));
        }
        if grid.len() != basis.n_bins() || stats.n_bins() != basis.n_bins() {
            return Err(Error::domain("grid, basis and standardization disagree on bin count"));
        }
        let inputs: Vec<f64> = training_inputs.iter().flat_map(|t| *t.coords()).collect();
        let emulators = hypers
            .into_par_iter()
            .enumerate()
            .map(|(i, h)| {
                let w: Vec<f64> = basis.w().row(i).iter().copied().collect();
                WeightEmulator::new(i, &inputs, PARAM_DIM, &w, h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            emulators,
            basis,
            stats,
            grid,
            provenance,
        })
    }

    /// Fit every weight GP by maximum likelihood. Weight `i` uses seed
    /// `derive_seed(opts.seed, i)` and reads only row `i` of `W`.
    pub fn fit(
        training_inputs: &[ParameterPoint],
        basis: Basis,
        stats: StandardizationStats,
        grid: Arc<WavelengthGrid>,
        opts: &MleOptions,
        provenance: Provenance,
    ) -> Result<Self> {
        let inputs: Vec<f64> = training_inputs.iter().flat_map(|t| *t.coords()).collect();
        let hypers = (0..basis.q())
            .into_par_iter()
            .map(|i| {
                let w: Vec<f64> = basis.w().row(i).iter().copied().collect();
                let o = MleOptions {
                    seed: derive_seed(opts.seed, i as u64),
                    ..*opts
                };
                fit_mle(&inputs, PARAM_DIM, &w, &o)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_hyperparameters(training_inputs, basis, stats, grid, hypers, provenance)
    }

    pub fn q(&self) -> usize {
        self.emulators.len()
    }

    pub fn emulators(&self) -> &[WeightEmulator] {
        &self.emulators
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn stats(&self) -> &StandardizationStats {
        &self.stats
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.grid
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn hyperparameters(&self) -> Vec<GpHyperParams> {
        self.emulators.iter().map(|e| e.hyper.clone()).collect()
    }

    pub fn training_inputs(&self) -> Vec<ParameterPoint> {
        self.emulators[0]
            .inputs
            .chunks_exact(PARAM_DIM)
            .map(|c| ParameterPoint::from_slice(c).expect("training inputs are validated"))
            .collect()
    }

    pub fn predict_weights(&self, theta: &ParameterPoint) -> WeightPrediction {
        self.predict_weights_at(theta.coords())
    }

    /// Like [`predict_weights`](Self::predict_weights) for raw coordinates;
    /// the GP itself is defined everywhere, only the prior is bounded.
    pub fn predict_weights_at(&self, x: &[f64; PARAM_DIM]) -> WeightPrediction {
        self.predict_weights_many(std::slice::from_ref(x))
            .pop()
            .expect("one point in, one prediction out")
    }

    /// Predictions at many points at once. Points are processed in padded
    /// blocks of [`PREDICT_BLOCK`] so that each weight's triangular solve is
    /// shared across a block, and so that the result for a point never
    /// depends on which other points were evaluated with it.
    pub fn predict_weights_many(&self, xs: &[[f64; PARAM_DIM]]) -> Vec<WeightPrediction> {
        let inputs = &self.emulators[0].inputs;
        let m = inputs.len() / PARAM_DIM;
        let blocks: Vec<Vec<[f64; PARAM_DIM]>> = xs
            .chunks(PREDICT_BLOCK)
            .map(|c| {
                let mut b = c.to_vec();
                b.resize(PREDICT_BLOCK, c[0]);
                b
            })
            .collect();
        let tasks: Vec<(usize, usize)> = (0..blocks.len())
            .flat_map(|b| (0..self.q()).map(move |i| (b, i)))
            .collect();
        let results: Vec<(Vec<f64>, Vec<f64>)> = tasks
            .par_iter()
            .map(|&(b, i)| {
                let em = &self.emulators[i];
                let s = &em.inv_two_l2;
                let block = &blocks[b];
                let r = Mat::from_fn(m, PREDICT_BLOCK, |k, c| {
                    let t = &inputs[k * PARAM_DIM..(k + 1) * PARAM_DIM];
                    let x = &block[c];
                    let d0 = t[0] - x[0];
                    let d1 = t[1] - x[1];
                    let d2 = t[2] - x[2];
                    (-(d0 * d0 * s[0] + d1 * d1 * s[1] + d2 * d2 * s[2])).exp()
                });
                em.predict_columns(r)
            })
            .collect();
        let q = self.q();
        (0..xs.len())
            .map(|n| {
                let (b, c) = (n / PREDICT_BLOCK, n % PREDICT_BLOCK);
                let per = &results[b * q..(b + 1) * q];
                WeightPrediction {
                    mean: per.iter().map(|(mu, _)| mu[c]).collect(),
                    variance: per.iter().map(|(_, v)| v[c]).collect(),
                }
            })
            .collect()
    }

    /// Emulated log-scale spectrum (predictive mean) and the weight
    /// predictions behind it.
    pub fn emulate_spectrum(&self, theta: &ParameterPoint) -> Result<(Spectrum, WeightPrediction)> {
        let pred = self.predict_weights(theta);
        let spectrum = crate::reduction::reconstruct(&pred.mean, &self.basis, &self.stats, &self.grid)?;
        debug_assert_eq!(spectrum.scale(), ScaleTag::Log);
        Ok((spectrum, pred))
    }
}
