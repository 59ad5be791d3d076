//! Emulator accuracy metrics and calibration summaries, plus the plot-ready
//! report files built from them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::PosteriorSummary;
use crate::emulator::EmulatorBundle;
use crate::error::{Error, Result};
use crate::model::{coordinate_to_native, ParameterPoint, ScaleTag, Spectrum, SpectrumSet, PARAM_DIM, PARAM_NAMES, SODIUM_INDEX};
use crate::pipeline::store::write_atomic;
use crate::reduction::StandardizationStats;

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Per-bin `1 - var(pred - truth) / var(truth)` across runs. Bins where the
/// truth does not vary are `None`.
pub fn r_squared(predictions: &SpectrumSet, truths: &SpectrumSet) -> Result<Vec<Option<f64>>> {
    if predictions.matrix().shape() != truths.matrix().shape() {
        return Err(Error::domain(format!(
            "prediction shape {:?} differs from truth shape {:?}",
            predictions.matrix().shape(),
            truths.matrix().shape()
        )));
    }
    if predictions.scale() != truths.scale() {
        return Err(Error::scale(truths.scale(), predictions.scale()));
    }
    if truths.n_runs() < 2 {
        return Err(Error::domain("R^2 needs at least two runs"));
    }
    let (p, t) = (predictions.matrix(), truths.matrix());
    Ok((0..truths.n_bins())
        .map(|j| {
            let raw = population_variance(t.row(j).iter().copied());
            if raw == 0.0 {
                return None;
            }
            let res = population_variance(p.row(j).iter().zip(t.row(j).iter()).map(|(a, b)| a - b));
            Some(1.0 - res / raw)
        })
        .collect())
}

/// Signed per-bin percent error `100 s (pred - truth) / (s truth + mu)` of a
/// standardized prediction; positive when the prediction is too high. Bins
/// whose true log intensity is zero are `None`.
pub fn percent_error(
    prediction: &Spectrum,
    truth: &Spectrum,
    stats: &StandardizationStats,
) -> Result<Vec<Option<f64>>> {
    prediction.expect_scale(ScaleTag::Standardized)?;
    truth.expect_scale(ScaleTag::Standardized)?;
    if prediction.len() != truth.len() || truth.len() != stats.n_bins() {
        return Err(Error::domain("spectra and standardization differ in length"));
    }
    let s = stats.scale;
    Ok(prediction
        .intensity()
        .iter()
        .zip(truth.intensity())
        .zip(&stats.mean)
        .map(|((p, t), mu)| {
            let denom = s * t + mu;
            if denom == 0.0 {
                None
            } else {
                Some(100.0 * s * (p - t) / denom)
            }
        })
        .collect())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmulatorReport {
    pub wavelengths: Vec<f64>,
    pub r_squared: Vec<Option<f64>>,
    /// One vector per test run, one entry per bin.
    pub percent_error: Vec<Vec<Option<f64>>>,
    /// Median over defined bins of `|percent error|`, per test run.
    pub median_abs_percent_error: Vec<f64>,
    pub test_inputs: Vec<ParameterPoint>,
}

impl EmulatorReport {
    /// Compare emulator mean predictions with clean log-scale test spectra.
    pub fn compute(bundle: &EmulatorBundle, test_log: &SpectrumSet) -> Result<Self> {
        test_log.expect_scale(ScaleTag::Log)?;
        let stats = bundle.stats();
        let truth = stats.standardize_set(test_log)?;
        let xs: Vec<[f64; PARAM_DIM]> = test_log.inputs().iter().map(|t| *t.coords()).collect();
        let preds = bundle.predict_weights_many(&xs);
        let mut columns = Vec::with_capacity(preds.len());
        for p in &preds {
            columns.push(bundle.basis().combine(&p.mean)?);
        }
        let flat: Vec<f64> = columns.concat();
        let predicted = SpectrumSet::new(
            truth.grid().clone(),
            nalgebra::DMatrix::from_vec(truth.n_bins(), truth.n_runs(), flat),
            truth.inputs().to_vec(),
            ScaleTag::Standardized,
        )?;
        let r_squared = r_squared(&predicted, &truth)?;
        let mut percent = Vec::with_capacity(truth.n_runs());
        let mut medians = Vec::with_capacity(truth.n_runs());
        for k in 0..truth.n_runs() {
            let pe = percent_error(&predicted.spectrum(k), &truth.spectrum(k), stats)?;
            let abs: Vec<f64> = pe.iter().flatten().map(|v| v.abs()).collect();
            medians.push(median(abs).unwrap_or(f64::NAN));
            percent.push(pe);
        }
        Ok(Self {
            wavelengths: test_log.grid().values().to_vec(),
            r_squared,
            percent_error: percent,
            median_abs_percent_error: medians,
            test_inputs: test_log.inputs().to_vec(),
        })
    }

    /// Share of (bin, run) cells with `|percent error| <= limit`; undefined
    /// cells count as misses.
    pub fn fraction_within(&self, limit: f64) -> f64 {
        let total: usize = self.percent_error.iter().map(Vec::len).sum();
        let hits = self
            .percent_error
            .iter()
            .flatten()
            .filter(|v| v.is_some_and(|e| e.abs() <= limit))
            .count();
        hits as f64 / total as f64
    }

    /// Share of bins with `R^2 > threshold`; undefined bins count as misses.
    pub fn fraction_r2_above(&self, threshold: f64) -> f64 {
        let hits = self.r_squared.iter().filter(|v| v.is_some_and(|r| r > threshold)).count();
        hits as f64 / self.r_squared.len() as f64
    }

    /// `wavelength, r2, pe_run_00, ...`; undefined values are left empty.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["wavelength".to_string(), "r2".to_string()];
        header.extend((0..self.percent_error.len()).map(|k| format!("pe_run_{k:02}")));
        w.write_record(&header)?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (j, wl) in self.wavelengths.iter().enumerate() {
            let mut row = vec![wl.to_string(), cell(self.r_squared[j])];
            row.extend(self.percent_error.iter().map(|pe| cell(pe[j])));
            w.write_record(&row)?;
        }
        write_atomic(path, &finish(w)?)
    }

    /// One row per test run: its design point and median absolute error.
    pub fn write_test_errors_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["run"];
        header.extend(PARAM_NAMES);
        header.push("median_abs_percent_error");
        w.write_record(&header)?;
        for (k, (t, m)) in self.test_inputs.iter().zip(&self.median_abs_percent_error).enumerate() {
            let c = t.coords();
            w.write_record(&[
                k.to_string(),
                c[0].to_string(),
                c[1].to_string(),
                c[2].to_string(),
                m.to_string(),
            ])?;
        }
        write_atomic(path, &finish(w)?)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Which family of synthetic observations a calibration case belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Noisy spectra at the test design points.
    Test,
    /// Test design points with the sodium fraction forced to 1.
    PureSodium,
    /// Test design points with the sodium fraction forced to 0.
    PureCopper,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Test, Suite::PureSodium, Suite::PureCopper];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Test => "test",
            Suite::PureSodium => "na",
            Suite::PureCopper => "cu",
        }
    }

    /// Stable name of case `index`, e.g. `test_07`.
    pub fn case_name(&self, index: usize) -> String {
        format!("{}_{index:02}", self.as_str())
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub suite: Suite,
    pub index: usize,
    pub truth: [f64; PARAM_DIM],
    pub truth_native: [f64; PARAM_DIM],
    pub summary: PosteriorSummary,
    /// `|posterior mean - truth|` in unit-cube units.
    pub abs_error: [f64; PARAM_DIM],
}

impl CaseRecord {
    pub fn new(suite: Suite, index: usize, truth: &ParameterPoint, summary: PosteriorSummary) -> Self {
        let t = *truth.coords();
        let mean = summary.mean();
        Self {
            suite,
            index,
            truth: t,
            truth_native: std::array::from_fn(|j| coordinate_to_native(j, t[j])),
            abs_error: std::array::from_fn(|j| (mean[j] - t[j]).abs()),
            summary,
        }
    }

    pub fn name(&self) -> String {
        self.suite.case_name(self.index)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub cases: Vec<CaseRecord>,
}

impl CalibrationReport {
    pub fn suite(&self, suite: Suite) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.suite == suite)
    }

    /// Cases of `suite` whose posterior mean of coordinate `dim` lies within
    /// `tol` of the truth.
    pub fn count_within(&self, suite: Suite, dim: usize, tol: f64) -> usize {
        self.suite(suite).filter(|c| c.abs_error[dim] <= tol).count()
    }

    /// Posterior means of the sodium fraction for one suite, in case order.
    pub fn sodium_means(&self, suite: Suite) -> Vec<f64> {
        self.suite(suite).map(|c| c.summary.unit[SODIUM_INDEX].mean).collect()
    }

    /// The test case with the largest summed absolute error.
    pub fn worst_case(&self, suite: Suite) -> Option<&CaseRecord> {
        self.suite(suite).fold(None, |best: Option<&CaseRecord>, c| {
            let e: f64 = c.abs_error.iter().sum();
            match best {
                Some(b) if b.abs_error.iter().sum::<f64>() >= e => Some(b),
                _ => Some(c),
            }
        })
    }

    /// Truth against posterior summaries for every case of every suite.
    pub fn write_scatter_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["case".to_string(), "suite".to_string()];
        for name in PARAM_NAMES {
            for col in ["true", "mean", "median", "lower", "upper", "abs_err", "true_native", "mean_native"] {
                header.push(format!("{col}_{name}"));
            }
        }
        w.write_record(&header)?;
        for c in &self.cases {
            let mut row = vec![c.name(), c.suite.to_string()];
            for j in 0..PARAM_DIM {
                let u = &c.summary.unit[j];
                let values = [
                    c.truth[j],
                    u.mean,
                    u.median,
                    u.lower,
                    u.upper,
                    c.abs_error[j],
                    c.truth_native[j],
                    c.summary.native[j].mean,
                ];
                row.extend(values.iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        write_atomic(path, &finish(w)?)
    }

    /// Posterior-mean sodium fractions of the single-element suites.
    pub fn write_single_element_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["suite", "case", "true_na_frac", "posterior_mean_na_frac"])?;
        for suite in [Suite::PureSodium, Suite::PureCopper] {
            for c in self.suite(suite) {
                w.write_record(&[
                    suite.to_string(),
                    c.index.to_string(),
                    c.truth[SODIUM_INDEX].to_string(),
                    c.summary.unit[SODIUM_INDEX].mean.to_string(),
                ])?;
            }
        }
        write_atomic(path, &finish(w)?)
    }
}

/// Posterior samples of one chain, in unit-cube and native units.
pub fn write_pairwise_csv(samples: &[ParameterPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
    header.extend(PARAM_NAMES.iter().map(|s| format!("{s}_native")));
    w.write_record(&header)?;
    for s in samples {
        let c = s.coords();
        let mut row: Vec<String> = c.iter().map(f64::to_string).collect();
        row.extend((0..PARAM_DIM).map(|j| coordinate_to_native(j, c[j]).to_string()));
        w.write_record(&row)?;
    }
    write_atomic(path, &finish(w)?)
}

/// Report files written by [`build_reports`], relative to the report directory.
pub const EMULATOR_METRICS_FILE: &str = "emulator_metrics.csv";
pub const EMULATOR_TEST_ERRORS_FILE: &str = "emulator_test_errors.csv";
pub const CALIBRATION_SCATTER_FILE: &str = "calibration_scatter.csv";
pub const SINGLE_ELEMENT_FILE: &str = "single_element_hist.csv";
pub const CALIBRATION_REPORT_FILE: &str = "calibration_report.json";

pub fn pairwise_file(case: &str) -> String {
    format!("pairwise_samples_{case}.csv")
}

/// Headline numbers written alongside the per-case records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub emulator_fraction_within_2pct: f64,
    pub emulator_fraction_r2_above_0_9: f64,
    pub test_cases: usize,
    /// Test cases within 0.05 (sodium fraction) or 0.15 (others) of truth,
    /// in parameter order.
    pub test_cases_within_tolerance: [usize; PARAM_DIM],
    pub pure_sodium_min_mean: Option<f64>,
    pub pure_copper_max_mean: Option<f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    summary: ReportSummary,
    cases: &'a [CaseRecord],
}

pub fn summarize_reports(emulator: &EmulatorReport, calibration: &CalibrationReport) -> ReportSummary {
    let tol = |j: usize| if j == SODIUM_INDEX { 0.05 } else { 0.15 };
    let na = calibration.sodium_means(Suite::PureSodium);
    let cu = calibration.sodium_means(Suite::PureCopper);
    ReportSummary {
        emulator_fraction_within_2pct: emulator.fraction_within(2.0),
        emulator_fraction_r2_above_0_9: emulator.fraction_r2_above(0.9),
        test_cases: calibration.suite(Suite::Test).count(),
        test_cases_within_tolerance: std::array::from_fn(|j| calibration.count_within(Suite::Test, j, tol(j))),
        pure_sodium_min_mean: na.iter().copied().reduce(f64::min),
        pure_copper_max_mean: cu.iter().copied().reduce(f64::max),
    }
}

/// Write every report file into `dir`. `pairwise` holds `(case name,
/// samples)` pairs exported for pairwise scatter plots.
pub fn build_reports(
    dir: &Path,
    emulator: &EmulatorReport,
    calibration: &CalibrationReport,
    pairwise: &[(String, Vec<ParameterPoint>)],
) -> Result<ReportSummary> {
    emulator.write_metrics_csv(&dir.join(EMULATOR_METRICS_FILE))?;
    emulator.write_test_errors_csv(&dir.join(EMULATOR_TEST_ERRORS_FILE))?;
    calibration.write_scatter_csv(&dir.join(CALIBRATION_SCATTER_FILE))?;
    calibration.write_single_element_csv(&dir.join(SINGLE_ELEMENT_FILE))?;
    for (name, samples) in pairwise {
        write_pairwise_csv(samples, &dir.join(pairwise_file(name)))?;
    }
    let summary = summarize_reports(emulator, calibration);
    let json = serde_json::to_vec_pretty(&ReportJson {
        summary: summary.clone(),
        cases: &calibration.cases,
    })?;
    write_atomic(&dir.join(CALIBRATION_REPORT_FILE), &json)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CoordinateSummary;
    use crate::model::WavelengthGrid;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn set(values: DMatrix<f64>, scale: ScaleTag) -> SpectrumSet {
        let n = values.ncols();
        let grid = Arc::new(WavelengthGrid::uniform(400.0, 500.0, values.nrows()).unwrap());
        let inputs = (0..n)
            .map(|k| ParameterPoint::new([k as f64 / n as f64, 0.5, 0.5]).unwrap())
            .collect();
        SpectrumSet::new(grid, values, inputs, scale).unwrap()
    }

    #[test]
    fn r_squared_reference_values() {
        let truth = set(DMatrix::from_fn(4, 5, |j, k| (j * 3 + k * k) as f64), ScaleTag::Log);
        let r = r_squared(&truth, &truth).unwrap();
        assert!(r.iter().all(|v| *v == Some(1.0)));

        let means = DMatrix::from_fn(4, 5, |j, _| truth.matrix().row(j).mean());
        let r = r_squared(&set(means, ScaleTag::Log), &truth).unwrap();
        assert!(r.iter().all(|v| (v.unwrap()).abs() < 1e-12));
    }

    #[test]
    fn r_squared_undefined_and_errors() {
        let mut m = DMatrix::from_fn(3, 4, |j, k| (j + k) as f64);
        m.row_mut(1).fill(2.0);
        let truth = set(m, ScaleTag::Log);
        let r = r_squared(&truth, &truth).unwrap();
        assert_eq!(r[1], None);
        assert!(r[0].is_some());
        let other = set(DMatrix::zeros(3, 3), ScaleTag::Log);
        assert!(r_squared(&other, &truth).is_err());
        let one = set(DMatrix::zeros(3, 1), ScaleTag::Log);
        assert!(r_squared(&one, &one).is_err());
    }

    #[test]
    fn percent_error_reference_value() {
        let grid = Arc::new(WavelengthGrid::uniform(0.0, 1.0, 3).unwrap());
        let stats = StandardizationStats::new(vec![10.0, 0.0, 5.0], 1.0).unwrap();
        let truth = Spectrum::new(grid.clone(), vec![0.0, 0.0, 1.0], ScaleTag::Standardized).unwrap();
        let pred = Spectrum::new(grid.clone(), vec![0.1, 0.3, 1.0], ScaleTag::Standardized).unwrap();
        let pe = percent_error(&pred, &truth, &stats).unwrap();
        assert!((pe[0].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pe[1], None);
        assert_eq!(pe[2], Some(0.0));
        let low = Spectrum::new(grid.clone(), vec![-0.1, 0.0, 1.0], ScaleTag::Standardized).unwrap();
        assert!(percent_error(&low, &truth, &stats).unwrap()[0].unwrap() < 0.0);
        let log = Spectrum::new(grid, vec![0.0; 3], ScaleTag::Log).unwrap();
        assert!(matches!(percent_error(&log, &truth, &stats), Err(Error::Scale { .. })));
    }

    #[test]
    fn median_handles_even_and_empty() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    fn summary_at(mean: [f64; 3]) -> PosteriorSummary {
        let c = |j: usize| CoordinateSummary {
            mean: mean[j],
            median: mean[j],
            lower: mean[j],
            upper: mean[j],
        };
        PosteriorSummary {
            n_samples: 1,
            acceptance_rate: 0.3,
            unit: (0..3).map(c).collect(),
            native: (0..3).map(c).collect(),
        }
    }

    #[test]
    fn calibration_report_counts() {
        let truth = ParameterPoint::new([0.5, 0.5, 0.5]).unwrap();
        let report = CalibrationReport {
            cases: vec![
                CaseRecord::new(Suite::Test, 0, &truth, summary_at([0.6, 0.5, 0.52])),
                CaseRecord::new(Suite::Test, 1, &truth, summary_at([0.9, 0.5, 0.6])),
                CaseRecord::new(Suite::PureSodium, 0, &truth, summary_at([0.5, 0.5, 0.95])),
            ],
        };
        assert_eq!(report.count_within(Suite::Test, 0, 0.15), 1);
        assert_eq!(report.count_within(Suite::Test, 2, 0.05), 1);
        assert_eq!(report.sodium_means(Suite::PureSodium), vec![0.95]);
        assert_eq!(report.worst_case(Suite::Test).unwrap().index, 1);
        assert_eq!(report.cases[1].name(), "test_01");
    }
}
