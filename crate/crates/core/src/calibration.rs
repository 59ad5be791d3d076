//! Posterior inference for the parameter point behind an observed spectrum.
//!
//! The likelihood lives in the reduced basis: with `w_obs = K~ y`,
//! `w_obs | theta ~ N(mu_w(theta), (lambda_y K^T K)^-1 + Sigma_w(theta))`, where both
//! covariance terms are diagonal. The prior is uniform on the unit cube.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::emulator::{EmulatorBundle, WeightPrediction};
use crate::error::{Error, Result};
use crate::model::{coordinate_to_native, ParameterPoint, ScaleTag, Spectrum, PARAM_DIM, PARAM_NAMES};
use crate::reduction::project;
use crate::rng::seeded;

/// Fraction of the requested sample count run (and discarded) as burn-in.
pub const BURN_IN_FRACTION: f64 = 0.2;

const ADAPT_BATCH: usize = 50;
const TARGET_ACCEPTANCE: f64 = 0.3;

/// An unnormalised log density on the unit cube.
pub trait LogDensity: Sync {
    fn log_density(&self, x: &[f64; PARAM_DIM]) -> Result<f64>;

    /// Evaluate at many points. Override when batching is cheaper.
    fn log_density_many(&self, xs: &[[f64; PARAM_DIM]]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.log_density(x)).collect()
    }

    /// Evaluate `targets[i]` at `xs[i]` for every `i`. Override to share
    /// work between related targets.
    fn log_density_each(targets: &[Self], xs: &[[f64; PARAM_DIM]]) -> Result<Vec<f64>>
    where
        Self: Sized,
    {
        targets.iter().zip(xs).map(|(t, x)| t.log_density(x)).collect()
    }

    /// Points tried, best first, when the sampler needs a starting value.
    fn start_candidates(&self) -> Vec<[f64; PARAM_DIM]> {
        vec![[0.5; PARAM_DIM]]
    }
}

pub fn log_prior(theta: &[f64; PARAM_DIM]) -> f64 {
    if theta.iter().all(|v| (0.0..=1.0).contains(v)) {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationProblem<'a> {
    bundle: &'a EmulatorBundle,
    w_obs: Vec<f64>,
    lambda_y: f64,
    /// `1 / (lambda_y (K^T K)_ii)`
    noise_variance: Vec<f64>,
}

impl<'a> CalibrationProblem<'a> {
    pub fn new(bundle: &'a EmulatorBundle, w_obs: Vec<f64>, lambda_y: f64) -> Result<Self> {
        if w_obs.len() != bundle.q() {
            return Err(Error::domain(format!(
                "observed weight vector has length {}, basis rank is {}",
                w_obs.len(),
                bundle.q()
            )));
        }
        if !(lambda_y > 0.0 && lambda_y.is_finite()) {
            return Err(Error::domain(format!("lambda_y must be positive, got {lambda_y}")));
        }
        if w_obs.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("observed weights are not finite".into()));
        }
        let noise_variance = bundle
            .basis()
            .ktk_diag()
            .iter()
            .map(|d| 1.0 / (lambda_y * d))
            .collect();
        Ok(Self {
            bundle,
            w_obs,
            lambda_y,
            noise_variance,
        })
    }

    /// Project a standardized observed spectrum onto the basis.
    pub fn from_observation(bundle: &'a EmulatorBundle, observed: &Spectrum, lambda_y: f64) -> Result<Self> {
        if observed.scale() != ScaleTag::Standardized {
            return Err(Error::scale(ScaleTag::Standardized, observed.scale()));
        }
        let w = project(observed, bundle.basis())?;
        Self::new(bundle, w, lambda_y)
    }

    pub fn bundle(&self) -> &EmulatorBundle {
        self.bundle
    }

    pub fn w_obs(&self) -> &[f64] {
        &self.w_obs
    }

    pub fn lambda_y(&self) -> f64 {
        self.lambda_y
    }

    pub fn log_likelihood(&self, theta: &ParameterPoint) -> Result<f64> {
        self.log_likelihood_at(theta.coords())
    }

    fn log_likelihood_at(&self, x: &[f64; PARAM_DIM]) -> Result<f64> {
        self.log_likelihood_from(x, &self.bundle.predict_weights_at(x))
    }

    /// Sum of `q` univariate Gaussian log densities given the emulator
    /// prediction at `x`.
    pub fn log_likelihood_from(&self, x: &[f64; PARAM_DIM], pred: &WeightPrediction) -> Result<f64> {
        let mut ll = 0.0;
        for i in 0..self.w_obs.len() {
            let var = self.noise_variance[i] + pred.variance[i];
            let r = self.w_obs[i] - pred.mean[i];
            ll -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var);
        }
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(Error::Numerical(format!("log-likelihood is not finite at {x:?}")))
        }
    }

    fn log_posterior_from(&self, x: &[f64; PARAM_DIM], pred: &WeightPrediction) -> Result<f64> {
        let lp = log_prior(x);
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        Ok(lp + self.log_likelihood_from(x, pred)?)
    }
}

impl LogDensity for CalibrationProblem<'_> {
    fn log_density(&self, x: &[f64; PARAM_DIM]) -> Result<f64> {
        self.log_density_many(std::slice::from_ref(x)).map(|v| v[0])
    }

    fn log_density_many(&self, xs: &[[f64; PARAM_DIM]]) -> Result<Vec<f64>> {
        let inside: Vec<[f64; PARAM_DIM]> = xs.iter().filter(|x| log_prior(x) == 0.0).copied().collect();
        let mut preds = self.bundle.predict_weights_many(&inside).into_iter();
        xs.iter()
            .map(|x| {
                if log_prior(x) == 0.0 {
                    let pred = preds.next().expect("one prediction per interior point");
                    self.log_posterior_from(x, &pred)
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            })
            .collect()
    }

    fn log_density_each(targets: &[Self], xs: &[[f64; PARAM_DIM]]) -> Result<Vec<f64>> {
        let Some(first) = targets.first() else {
            return Ok(Vec::new());
        };
        if !targets.iter().all(|t| std::ptr::eq(t.bundle, first.bundle)) {
            return targets.iter().zip(xs).map(|(t, x)| t.log_density(x)).collect();
        }
        // Points outside the cube never reach the emulator; clamping them
        // only keeps the batch well formed.
        let clamped: Vec<[f64; PARAM_DIM]> = xs.iter().map(|x| x.map(|v| v.clamp(0.0, 1.0))).collect();
        let preds = first.bundle.predict_weights_many(&clamped);
        targets
            .iter()
            .zip(xs)
            .zip(&preds)
            .map(|((t, x), pred)| t.log_posterior_from(x, pred))
            .collect()
    }

    fn start_candidates(&self) -> Vec<[f64; PARAM_DIM]> {
        self.bundle.training_inputs().iter().map(|t| *t.coords()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub samples: Vec<ParameterPoint>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub burn_in: usize,
    /// Proposal covariance used after burn-in (row-major).
    pub proposal_covariance: [f64; PARAM_DIM * PARAM_DIM],
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.coords()[j]).collect()
    }

    /// CSV with one row per post-burn-in sample; `iteration` counts from the
    /// start of the run, so the first row is `burn_in`.
    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration"];
        header.extend(PARAM_NAMES);
        header.push("log_post");
        w.write_record(&header)?;
        for (i, (s, lp)) in self.samples.iter().zip(&self.log_posterior).enumerate() {
            let c = s.coords();
            w.write_record(&[
                (self.burn_in + i).to_string(),
                c[0].to_string(),
                c[1].to_string(),
                c[2].to_string(),
                lp.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        crate::pipeline::store::write_atomic(path, &buf)
    }
}

/// Read back the samples of a chain written by [`Chain::write_csv_to`].
pub fn read_chain_samples<R: Read>(input: R) -> Result<Vec<ParameterPoint>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Integrity(format!("chain file has no '{name}' column")))
    };
    let cols = [column(PARAM_NAMES[0])?, column(PARAM_NAMES[1])?, column(PARAM_NAMES[2])?];
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut c = [0.0; PARAM_DIM];
        for (j, &k) in cols.iter().enumerate() {
            c[j] = record
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Integrity(format!("unreadable chain value in row {}", out.len())))?;
        }
        out.push(ParameterPoint::new(c)?);
    }
    Ok(out)
}

/// Fold a coordinate back into `[0, 1]` by reflecting at both faces.
fn reflect(v: f64) -> f64 {
    let y = v.rem_euclid(2.0);
    if y > 1.0 {
        2.0 - y
    } else {
        y
    }
}

fn lower_cholesky(cov: &[f64; PARAM_DIM * PARAM_DIM]) -> Option<[f64; PARAM_DIM * PARAM_DIM]> {
    let m = DMatrix::from_row_slice(PARAM_DIM, PARAM_DIM, cov);
    let l = Cholesky::new(m)?.unpack();
    let mut out = [0.0; PARAM_DIM * PARAM_DIM];
    for i in 0..PARAM_DIM {
        for j in 0..=i {
            out[i * PARAM_DIM + j] = l[(i, j)];
        }
    }
    Some(out)
}

fn sample_covariance(xs: &[[f64; PARAM_DIM]]) -> [f64; PARAM_DIM * PARAM_DIM] {
    let n = xs.len() as f64;
    let mut mean = [0.0; PARAM_DIM];
    for x in xs {
        for j in 0..PARAM_DIM {
            mean[j] += x[j] / n;
        }
    }
    let mut cov = [0.0; PARAM_DIM * PARAM_DIM];
    for x in xs {
        for a in 0..PARAM_DIM {
            for b in 0..PARAM_DIM {
                cov[a * PARAM_DIM + b] += (x[a] - mean[a]) * (x[b] - mean[b]) / (n - 1.0);
            }
        }
    }
    cov
}

/// Starting point: the best-scoring candidate.
fn best_start(candidates: &[[f64; PARAM_DIM]], values: &[f64]) -> Result<([f64; PARAM_DIM], f64)> {
    let mut best = ([0.5; PARAM_DIM], f64::NEG_INFINITY);
    for (c, &v) in candidates.iter().zip(values) {
        if v > best.1 {
            best = (*c, v);
        }
    }
    if best.1 == f64::NEG_INFINITY {
        return Err(Error::Initialization(
            "every candidate starting point has zero posterior density".into(),
        ));
    }
    Ok(best)
}

/// State of one adaptive random-walk Metropolis chain.
struct Walker {
    x: [f64; PARAM_DIM],
    lp: f64,
    rng: rand_chacha::ChaCha8Rng,
    seed: u64,
    burn_in: usize,
    shape: [f64; PARAM_DIM * PARAM_DIM],
    chol: [f64; PARAM_DIM * PARAM_DIM],
    log_scale: f64,
    history: Vec<[f64; PARAM_DIM]>,
    batch_accepted: usize,
    samples: Vec<ParameterPoint>,
    log_posterior: Vec<f64>,
    accepted: usize,
}

impl Walker {
    fn new(start: [f64; PARAM_DIM], lp: f64, seed: u64, burn_in: usize, n_samples: usize) -> Self {
        let mut shape = [0.0; PARAM_DIM * PARAM_DIM];
        for j in 0..PARAM_DIM {
            shape[j * PARAM_DIM + j] = 0.05 * 0.05;
        }
        let chol = lower_cholesky(&shape).expect("diagonal start is positive definite");
        Self {
            x: start,
            lp,
            rng: seeded(seed),
            seed,
            burn_in,
            shape,
            chol,
            log_scale: 0.0,
            history: Vec::with_capacity(burn_in),
            batch_accepted: 0,
            samples: Vec::with_capacity(n_samples),
            log_posterior: Vec::with_capacity(n_samples),
            accepted: 0,
        }
    }

    fn propose(&mut self) -> [f64; PARAM_DIM] {
        let z: [f64; PARAM_DIM] = std::array::from_fn(|_| StandardNormal.sample(&mut self.rng));
        let s = self.log_scale.exp();
        std::array::from_fn(|a| {
            let step: f64 = (0..=a).map(|b| self.chol[a * PARAM_DIM + b] * z[b]).sum();
            reflect(self.x[a] + s * step)
        })
    }

    fn settle(&mut self, it: usize, y: [f64; PARAM_DIM], lp_y: f64) -> Result<()> {
        let u: f64 = self.rng.random();
        let accept = lp_y > f64::NEG_INFINITY && u.ln() < lp_y - self.lp;
        if accept {
            self.x = y;
            self.lp = lp_y;
        }
        if it < self.burn_in {
            self.history.push(self.x);
            self.batch_accepted += accept as usize;
            if (it + 1) % ADAPT_BATCH == 0 {
                self.adapt();
            }
        } else {
            self.accepted += accept as usize;
            self.samples.push(ParameterPoint::new(self.x)?);
            self.log_posterior.push(self.lp);
        }
        Ok(())
    }

    fn adapt(&mut self) {
        let rate = self.batch_accepted as f64 / ADAPT_BATCH as f64;
        self.batch_accepted = 0;
        self.log_scale += 3.0 * (rate - TARGET_ACCEPTANCE);
        if self.history.len() >= 4 * ADAPT_BATCH {
            let recent = &self.history[self.history.len() / 2..];
            let mut cov = sample_covariance(recent);
            for j in 0..PARAM_DIM {
                cov[j * PARAM_DIM + j] += 1e-12;
            }
            if let Some(l) = lower_cholesky(&cov) {
                // Keep the step volume continuous across the shape change.
                let old: f64 = (0..PARAM_DIM).map(|j| self.chol[j * PARAM_DIM + j].ln()).sum();
                let new: f64 = (0..PARAM_DIM).map(|j| l[j * PARAM_DIM + j].ln()).sum();
                self.log_scale += (old - new) / PARAM_DIM as f64;
                self.chol = l;
                self.shape = cov;
            }
        }
        // Steps wider than the cube buy nothing; very narrow ones stall.
        let widest = (0..PARAM_DIM)
            .map(|j| self.chol[j * PARAM_DIM + j])
            .fold(0.0f64, f64::max)
            .ln();
        self.log_scale = self.log_scale.clamp(-20.0 - widest, -widest);
    }

    fn finish(self, n_samples: usize) -> Chain {
        let s2 = (2.0 * self.log_scale).exp();
        Chain {
            samples: self.samples,
            log_posterior: self.log_posterior,
            acceptance_rate: self.accepted as f64 / n_samples as f64,
            seed: self.seed,
            burn_in: self.burn_in,
            proposal_covariance: self.shape.map(|v| v * s2),
        }
    }
}

fn burn_in_for(n_samples: usize) -> Result<usize> {
    if n_samples == 0 {
        return Err(Error::domain("n_samples must be at least 1"));
    }
    Ok((n_samples as f64 * BURN_IN_FRACTION).ceil() as usize)
}

/// Advance all walkers together; `eval` scores one proposal per walker.
fn run_walkers<F>(mut walkers: Vec<Walker>, n_samples: usize, mut eval: F) -> Result<Vec<Chain>>
where
    F: FnMut(&[[f64; PARAM_DIM]]) -> Result<Vec<f64>>,
{
    let total = walkers.first().map_or(0, |w| w.burn_in) + n_samples;
    for it in 0..total {
        let proposals: Vec<[f64; PARAM_DIM]> = walkers.iter_mut().map(Walker::propose).collect();
        let values = eval(&proposals)?;
        for ((w, y), v) in walkers.iter_mut().zip(proposals).zip(values) {
            w.settle(it, y, v)?;
        }
    }
    Ok(walkers.into_iter().map(|w| w.finish(n_samples)).collect())
}

/// Adaptive random-walk Metropolis on the unit cube.
///
/// Runs `ceil(0.2 n_samples)` burn-in iterations, during which the proposal
/// shape tracks the sample covariance and its scale is tuned towards 30%
/// acceptance, then `n_samples` iterations with the proposal frozen. Proposals
/// are reflected into the cube, which keeps them symmetric. The chain starts
/// at the best-scoring of `target.start_candidates()`.
pub fn run_mcmc<D: LogDensity + ?Sized>(target: &D, n_samples: usize, seed: u64) -> Result<Chain> {
    let burn_in = burn_in_for(n_samples)?;
    let candidates = target.start_candidates();
    let (start, lp) = best_start(&candidates, &target.log_density_many(&candidates)?)?;
    let walker = Walker::new(start, lp, seed, burn_in, n_samples);
    let mut chains = run_walkers(vec![walker], n_samples, |xs| target.log_density_many(xs))?;
    Ok(chains.pop().expect("one walker"))
}

/// One chain per target, advanced in lockstep so that related targets can
/// share work. Chain `i` is identical to `run_mcmc(&targets[i], n_samples,
/// seeds[i])` whenever the target's batched evaluations are exact per point.
pub fn run_mcmc_many<D: LogDensity>(targets: &[D], n_samples: usize, seeds: &[u64]) -> Result<Vec<Chain>> {
    if targets.len() != seeds.len() {
        return Err(Error::domain("one seed per target is required"));
    }
    let burn_in = burn_in_for(n_samples)?;
    let walkers = targets
        .iter()
        .zip(seeds)
        .map(|(t, &seed)| {
            let candidates = t.start_candidates();
            let (start, lp) = best_start(&candidates, &t.log_density_many(&candidates)?)?;
            Ok(Walker::new(start, lp, seed, burn_in, n_samples))
        })
        .collect::<Result<Vec<_>>>()?;
    run_walkers(walkers, n_samples, |xs| D::log_density_each(targets, xs))
}

/// Normalised posterior mass over the cells of a uniform `res^3` grid,
/// evaluated at cell centres. Cell `(i, j, k)` is stored at `i res^2 + j res + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPosterior {
    pub resolution: usize,
    pub mass: Vec<f64>,
}

impl GridPosterior {
    pub fn cell_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.resolution as f64
    }

    /// Marginal mass of coordinate `dim` over its `resolution` cells.
    pub fn marginal(&self, dim: usize) -> Vec<f64> {
        let r = self.resolution;
        let mut out = vec![0.0; r];
        for (idx, m) in self.mass.iter().enumerate() {
            let cell = [idx / (r * r), (idx / r) % r, idx % r];
            out[cell[dim]] += m;
        }
        out
    }

    pub fn argmax(&self) -> [f64; PARAM_DIM] {
        let r = self.resolution;
        let (idx, _) = self
            .mass
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &m)| if m > best.1 { (i, m) } else { best });
        [
            self.cell_center(idx / (r * r)),
            self.cell_center((idx / r) % r),
            self.cell_center(idx % r),
        ]
    }
}

pub fn grid_posterior<D: LogDensity + ?Sized>(target: &D, resolution: usize) -> Result<GridPosterior> {
    if resolution < 2 {
        return Err(Error::domain(format!("grid resolution must be at least 2, got {resolution}")));
    }
    let r = resolution;
    let center = |i: usize| (i as f64 + 0.5) / r as f64;
    let points: Vec<[f64; PARAM_DIM]> = (0..r * r * r)
        .map(|idx| [center(idx / (r * r)), center((idx / r) % r), center(idx % r)])
        .collect();
    let mut log_mass = Vec::with_capacity(points.len());
    for chunk in points.chunks(4096) {
        log_mass.extend(target.log_density_many(chunk)?);
    }
    let max = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numerical("posterior density is zero at every grid cell".into()));
    }
    let mut mass: Vec<f64> = log_mass.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = mass.iter().sum();
    for m in &mut mass {
        *m /= total;
    }
    Ok(GridPosterior { resolution, mass })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub mean: f64,
    pub median: f64,
    /// 5% quantile.
    pub lower: f64,
    /// 95% quantile.
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_samples: usize,
    pub acceptance_rate: f64,
    /// In [`PARAM_NAMES`] order.
    pub unit: Vec<CoordinateSummary>,
    pub native: Vec<CoordinateSummary>,
}

impl PosteriorSummary {
    pub fn mean(&self) -> [f64; PARAM_DIM] {
        std::array::from_fn(|j| self.unit[j].mean)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(chain: &Chain) -> Result<PosteriorSummary> {
    if chain.is_empty() {
        return Err(Error::domain("cannot summarize an empty chain"));
    }
    let mut unit = Vec::with_capacity(PARAM_DIM);
    let mut native = Vec::with_capacity(PARAM_DIM);
    for j in 0..PARAM_DIM {
        let mut v = chain.coordinate(j);
        let mean = (v.iter().sum::<f64>() / v.len() as f64).clamp(0.0, 1.0);
        v.sort_by(f64::total_cmp);
        let s = CoordinateSummary {
            mean,
            median: quantile(&v, 0.5),
            lower: quantile(&v, 0.05),
            upper: quantile(&v, 0.95),
        };
        native.push(CoordinateSummary {
            mean: coordinate_to_native(j, s.mean),
            median: coordinate_to_native(j, s.median),
            lower: coordinate_to_native(j, s.lower),
            upper: coordinate_to_native(j, s.upper),
        });
        unit.push(s);
    }
    Ok(PosteriorSummary {
        n_samples: chain.len(),
        acceptance_rate: chain.acceptance_rate,
        unit,
        native,
    })
}

/// Normalised histogram of values in `[0, 1]` over `bins` equal cells.
pub fn unit_histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
