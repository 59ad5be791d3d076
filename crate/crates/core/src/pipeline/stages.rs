//! The pipeline stages. Each stage checks that its predecessors exist and
//! were produced by the current configuration, does its work, and records a
//! hash that chains its own settings onto its predecessors' hashes.

use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use serde_json::json;

use crate::calibration::{read_chain_samples, run_mcmc_many, summarize, CalibrationProblem};
use crate::design::{fixed_composition_design, latin_hypercube, Design, DesignKind};
use crate::emulator::{EmulatorBundle, MleOptions, Provenance};
use crate::error::{Error, Result};
use crate::evaluation::{build_reports, CalibrationReport, CaseRecord, EmulatorReport, Suite};
use crate::model::{ParameterPoint, ScaleTag, SpectrumSet, WavelengthGrid, PARAM_DIM};
use crate::pipeline::config::{sha256_hex, PipelineConfig};
use crate::pipeline::store::{load_bundle, load_reduction, save_bundle, save_reduction, ArtifactStore, StageRecord};
use crate::reduction::{build_basis, fit_standardization, log_transform, log_transform_spectrum};
use crate::rng::{derive_seed, seeded};
use crate::surrogate::{add_noise, NoiseModel, Surrogate};

pub const DESIGN_TRAINING: &str = "design_training";
pub const DESIGN_TEST: &str = "design_test";
pub const SIMULATE: &str = "simulate";
pub const REDUCE: &str = "reduce";
pub const FIT: &str = "fit";
pub const CALIBRATE: &str = "calibrate";
pub const EVALUATE: &str = "evaluate";

pub const SUMMARIES_FILE: &str = "calibration/summaries.json";
pub const REPORT_DIR: &str = "reports";

/// Stream id for picking the second exported pairwise case.
const PAIRWISE_STREAM: u64 = 0xFACE;

/// What a finished stage reports back to the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub summary: String,
}

fn command_for(stage: &str) -> &'static str {
    match stage {
        DESIGN_TRAINING => "specal design --kind training",
        DESIGN_TEST => "specal design --kind test",
        SIMULATE => "specal simulate",
        REDUCE => "specal reduce",
        FIT => "specal fit",
        CALIBRATE => "specal calibrate --case all",
        _ => "specal evaluate",
    }
}

fn parents(stage: &str) -> &'static [&'static str] {
    match stage {
        SIMULATE => &[DESIGN_TRAINING, DESIGN_TEST],
        REDUCE => &[SIMULATE],
        FIT => &[REDUCE],
        CALIBRATE => &[FIT],
        EVALUATE => &[CALIBRATE],
        _ => &[],
    }
}

/// The settings that determine a stage's own output.
fn stage_params(cfg: &PipelineConfig, stage: &str) -> Result<serde_json::Value> {
    let s = &cfg.seeds;
    Ok(match stage {
        DESIGN_TRAINING => json!({ "m": cfg.m_train, "seed": s.design_train }),
        DESIGN_TEST => json!({ "m": cfg.m_test, "seed": s.design_test }),
        SIMULATE => json!({ "surrogate": cfg.surrogate()? }),
        REDUCE => json!({ "q": cfg.q }),
        FIT => json!({ "nugget": cfg.nugget, "mle_starts": cfg.mle_starts, "seed": s.mle }),
        CALIBRATE => json!({
            "lambda_y": cfg.lambda_y,
            "n_samples": cfg.n_samples,
            "noise_seed": s.noise,
            "mcmc_seed": s.mcmc,
        }),
        EVALUATE => json!({ "pairwise_seed": s.mcmc }),
        other => return Err(Error::domain(format!("unknown stage '{other}'"))),
    })
}

fn chain_hash(stage: &str, params: &serde_json::Value, parent_hashes: &[String]) -> Result<String> {
    let p = serde_json::to_vec(params)?;
    let mut parts: Vec<&[u8]> = vec![stage.as_bytes(), &p];
    parts.extend(parent_hashes.iter().map(|h| h.as_bytes()));
    Ok(sha256_hex(&parts))
}

/// Hash a stage would carry if it and all its predecessors were produced
/// from `cfg`.
pub fn expected_hash(cfg: &PipelineConfig, stage: &str) -> Result<String> {
    let parent_hashes = parents(stage)
        .iter()
        .map(|p| expected_hash(cfg, p))
        .collect::<Result<Vec<_>>>()?;
    chain_hash(stage, &stage_params(cfg, stage)?, &parent_hashes)
}

/// The first stage on the path to `stage` whose recorded hash no longer
/// matches `cfg`, or `stage` itself when none earlier does.
fn earliest_stale(cfg: &PipelineConfig, store: &ArtifactStore, stage: &'static str) -> Result<&'static str> {
    for &p in parents(stage) {
        let stale = match store.stage(p) {
            Some(rec) => rec.hash != expected_hash(cfg, p)?,
            None => true,
        };
        if stale {
            return earliest_stale(cfg, store, p);
        }
    }
    Ok(stage)
}

/// One stage invocation against an artifact directory.
struct StageRun<'a> {
    cfg: &'a PipelineConfig,
    store: ArtifactStore,
    stage: &'static str,
    parent_hashes: Vec<String>,
}

impl<'a> StageRun<'a> {
    /// Open the store and check the stage's predecessors.
    fn begin(cfg: &'a PipelineConfig, stage: &'static str, force: bool) -> Result<Self> {
        cfg.validate()?;
        let store = ArtifactStore::open(&cfg.output_dir)?;
        let mut parent_hashes = Vec::new();
        for &p in parents(stage) {
            let rec = store.stage(p).ok_or_else(|| {
                Error::Missing(format!(
                    "stage '{p}' has not been run in {}; run `{}` first",
                    cfg.output_dir.display(),
                    command_for(p)
                ))
            })?;
            if !force && rec.hash != expected_hash(cfg, p)? {
                let root = earliest_stale(cfg, &store, p)?;
                return Err(Error::Stale(format!(
                    "stage '{root}' in {} was produced with different settings; re-run from `{}` or pass --force",
                    cfg.output_dir.display(),
                    command_for(root)
                )));
            }
            parent_hashes.push(rec.hash.clone());
        }
        Ok(Self {
            cfg,
            store,
            stage,
            parent_hashes,
        })
    }

    fn hash(&self) -> Result<String> {
        chain_hash(self.stage, &stage_params(self.cfg, self.stage)?, &self.parent_hashes)
    }

    fn finish(mut self, outputs: Vec<String>, summary: String) -> Result<StageOutcome> {
        let record = StageRecord {
            hash: self.hash()?,
            params: stage_params(self.cfg, self.stage)?,
            seeds: self.cfg.seeds.as_map(),
            outputs,
        };
        self.store.record_stage(self.stage, record);
        let m = self.store.manifest_mut();
        m.config_hash = self.cfg.hash()?;
        m.seeds = self.cfg.seeds.as_map();
        self.store.save_manifest()?;
        Ok(StageOutcome {
            stage: self.stage,
            summary,
        })
    }
}

fn design_array(kind: DesignKind) -> &'static str {
    match kind {
        DesignKind::Training => DESIGN_TRAINING,
        DesignKind::Test => DESIGN_TEST,
    }
}

fn load_design(store: &ArtifactStore, kind: DesignKind) -> Result<Design> {
    let name = design_array(kind);
    let (shape, rows) = store.read_array(name)?;
    if shape.len() != 2 || shape[1] != PARAM_DIM {
        return Err(Error::Integrity(format!("design array '{name}' has shape {shape:?}")));
    }
    let seed = store
        .stage(name)
        .and_then(|r| r.params.get("seed"))
        .and_then(|v| v.as_u64())
        .unwrap_or_default();
    Design::from_rows(rows, PARAM_DIM, seed, kind)
}

fn load_grid(store: &ArtifactStore) -> Result<std::sync::Arc<WavelengthGrid>> {
    Ok(std::sync::Arc::new(WavelengthGrid::new(store.read_vector("wavelengths")?)?))
}

fn load_raw(store: &ArtifactStore, name: &str, design: &Design) -> Result<SpectrumSet> {
    SpectrumSet::new(load_grid(store)?, store.read_matrix(name)?, design.parameter_points()?, ScaleTag::Raw)
}

/// Latin hypercube designs. `kind = None` builds both.
pub fn cmd_design(cfg: &PipelineConfig, kind: Option<DesignKind>, force: bool) -> Result<Vec<StageOutcome>> {
    let kinds = match kind {
        Some(k) => vec![k],
        None => vec![DesignKind::Training, DesignKind::Test],
    };
    let mut outcomes = Vec::new();
    for kind in kinds {
        let name = design_array(kind);
        let mut run = StageRun::begin(cfg, name, force)?;
        let (m, seed) = match kind {
            DesignKind::Training => (cfg.m_train, cfg.seeds.design_train),
            DesignKind::Test => (cfg.m_test, cfg.seeds.design_test),
        };
        let design = latin_hypercube(m, PARAM_DIM, seed, kind)?;
        run.store.write_array(name, &[m, PARAM_DIM], design.as_rows())?;
        let csv_path = format!("designs/{}.csv", kind.as_str());
        let mut csv = Vec::new();
        design.write_csv_to(&mut csv)?;
        run.store.write_file(&csv_path, &csv)?;
        outcomes.push(run.finish(
            vec![format!("arrays/{name}.f64"), csv_path],
            format!("{m}-point {} design (seed {seed})", kind.as_str()),
        )?);
    }
    Ok(outcomes)
}

/// Run the forward model at every training and test design point.
pub fn cmd_simulate(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let mut run = StageRun::begin(cfg, SIMULATE, force)?;
    let surrogate = Surrogate::new(cfg.surrogate()?)?;
    let mut outputs = vec!["arrays/wavelengths.f64".to_string()];
    run.store
        .write_array("wavelengths", &[surrogate.grid().len()], surrogate.grid().values())?;
    for (kind, array) in [(DesignKind::Training, "train_raw"), (DesignKind::Test, "test_raw")] {
        let design = load_design(&run.store, kind)?;
        let set = surrogate.simulate_batch(&design)?;
        run.store.write_matrix(array, set.matrix())?;
        let csv_path = format!("simulations/{}.csv", kind.as_str());
        let mut csv = Vec::new();
        set.write_csv_to(&mut csv)?;
        run.store.write_file(&csv_path, &csv)?;
        outputs.push(format!("arrays/{array}.f64"));
        outputs.push(csv_path);
    }
    let bins = surrogate.grid().len();
    run.finish(
        outputs,
        format!("{} training and {} test spectra on {bins} bins", cfg.m_train, cfg.m_test),
    )
}

/// Log transform, standardize and reduce the training spectra.
pub fn cmd_reduce(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let mut run = StageRun::begin(cfg, REDUCE, force)?;
    let design = load_design(&run.store, DesignKind::Training)?;
    let log = log_transform(&load_raw(&run.store, "train_raw", &design)?)?;
    let stats = fit_standardization(&log)?;
    let basis = build_basis(&stats.standardize_set(&log)?, cfg.q)?;
    save_reduction(&mut run.store, &basis, &stats)?;
    let explained = basis.variance_explained()[cfg.q - 1];
    run.finish(
        ["K", "W", "mu", "sigma", "singular_values"]
            .iter()
            .map(|n| format!("arrays/{n}.f64"))
            .collect(),
        format!("q = {} explains {:.6}% of training variance", cfg.q, 100.0 * explained),
    )
}

/// Fit one GP per principal-component weight by maximum likelihood.
pub fn cmd_fit(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let mut run = StageRun::begin(cfg, FIT, force)?;
    let design = load_design(&run.store, DesignKind::Training)?;
    let (basis, stats) = load_reduction(&run.store)?;
    let opts = MleOptions {
        starts: cfg.mle_starts,
        seed: cfg.seeds.mle,
        nugget: cfg.nugget,
        ..Default::default()
    };
    let provenance = Provenance {
        config_hash: cfg.hash()?,
        seeds: cfg.seeds.as_map(),
    };
    let grid = load_grid(&run.store)?;
    let bundle = EmulatorBundle::fit(&design.parameter_points()?, basis, stats, grid, &opts, provenance)?;
    save_bundle(&bundle, &mut run.store)?;
    let q = bundle.q();
    run.finish(
        vec!["arrays/training_inputs.f64".into(), "manifest.json#bundle".into()],
        format!("{q} weight emulators fitted"),
    )
}

/// Which calibration cases to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseSelection {
    All,
    Suite(Suite),
    /// One noisy test observation.
    Test(usize),
}

impl FromStr for CaseSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "test" => Ok(Self::Suite(Suite::Test)),
            "na" => Ok(Self::Suite(Suite::PureSodium)),
            "cu" => Ok(Self::Suite(Suite::PureCopper)),
            other => other.parse().map(Self::Test).map_err(|_| {
                Error::domain(format!(
                    "case must be all, test, na, cu or a test index, got '{other}'"
                ))
            }),
        }
    }
}

impl CaseSelection {
    fn cases(&self, m_test: usize) -> Result<Vec<(Suite, usize)>> {
        Ok(match *self {
            Self::All => Suite::ALL
                .iter()
                .flat_map(|&s| (0..m_test).map(move |k| (s, k)))
                .collect(),
            Self::Suite(s) => (0..m_test).map(|k| (s, k)).collect(),
            Self::Test(k) if k < m_test => vec![(Suite::Test, k)],
            Self::Test(k) => {
                return Err(Error::domain(format!("test case {k} does not exist (m_test = {m_test})")))
            }
        })
    }
}

/// Seed stream of one calibration case.
pub fn case_stream(suite: Suite, index: usize) -> u64 {
    let s = match suite {
        Suite::Test => 0,
        Suite::PureSodium => 1,
        Suite::PureCopper => 2,
    };
    s * 1_000_000 + index as u64
}

pub fn chain_file(suite: Suite, index: usize) -> String {
    format!("calibration/chain_{}.csv", suite.case_name(index))
}

/// Observed spectrum and truth for one calibration case: the clean forward
/// model output at the case's design point, log transformed, standardized
/// with the training statistics, plus Gaussian noise of precision `lambda_y`.
pub fn observation(
    cfg: &PipelineConfig,
    bundle: &EmulatorBundle,
    surrogate: &Surrogate,
    test_design: &Design,
    suite: Suite,
    index: usize,
) -> Result<(ParameterPoint, crate::model::Spectrum)> {
    let design = match suite {
        Suite::Test => test_design.clone(),
        Suite::PureSodium => fixed_composition_design(test_design, 1.0)?,
        Suite::PureCopper => fixed_composition_design(test_design, 0.0)?,
    };
    let truth = ParameterPoint::from_slice(design.point(index))?;
    let raw = surrogate.simulate(&truth.to_native())?;
    let standardized = bundle.stats().standardize(&log_transform_spectrum(&raw)?)?;
    let noise = NoiseModel::new(cfg.lambda_y, derive_seed(cfg.seeds.noise, case_stream(suite, index)))?;
    Ok((truth, add_noise(&standardized, &noise)?))
}

/// MCMC for the selected observations; all chains advance together.
pub fn cmd_calibrate(cfg: &PipelineConfig, selection: CaseSelection, force: bool) -> Result<StageOutcome> {
    let mut run = StageRun::begin(cfg, CALIBRATE, force)?;
    let bundle = load_bundle(&run.store)?;
    let test_design = load_design(&run.store, DesignKind::Test)?;
    let surrogate = Surrogate::new(cfg.surrogate()?)?;
    let cases = selection.cases(test_design.len())?;

    let mut truths = Vec::with_capacity(cases.len());
    let mut problems = Vec::with_capacity(cases.len());
    let mut seeds = Vec::with_capacity(cases.len());
    for &(suite, k) in &cases {
        let (truth, observed) = observation(cfg, &bundle, &surrogate, &test_design, suite, k)?;
        truths.push(truth);
        problems.push(CalibrationProblem::from_observation(&bundle, &observed, cfg.lambda_y)?);
        seeds.push(derive_seed(cfg.seeds.mcmc, case_stream(suite, k)));
    }
    let chains = run_mcmc_many(&problems, cfg.n_samples, &seeds)?;

    // Earlier results from the same settings are kept; anything else is stale.
    let hash = run.hash()?;
    let mut records: Vec<CaseRecord> = match run.store.stage(CALIBRATE) {
        Some(rec) if rec.hash == hash => serde_json::from_slice(&run.store.read_file(SUMMARIES_FILE)?)?,
        _ => Vec::new(),
    };
    for (((suite, k), truth), chain) in cases.iter().zip(&truths).zip(&chains) {
        let mut csv = Vec::new();
        chain.write_csv_to(&mut csv)?;
        run.store.write_file(&chain_file(*suite, *k), &csv)?;
        records.retain(|r| !(r.suite == *suite && r.index == *k));
        records.push(CaseRecord::new(*suite, *k, truth, summarize(chain)?));
    }
    records.sort_by_key(|r| (r.suite, r.index));
    let mut json = serde_json::to_vec_pretty(&records)?;
    json.push(b'\n');
    run.store.write_file(SUMMARIES_FILE, &json)?;

    let mut outputs: Vec<String> = records.iter().map(|r| chain_file(r.suite, r.index)).collect();
    outputs.push(SUMMARIES_FILE.to_string());
    let mean_acceptance = chains.iter().map(|c| c.acceptance_rate).sum::<f64>() / chains.len() as f64;
    run.finish(
        outputs,
        format!(
            "{} chains of {} samples (mean acceptance {:.2})",
            chains.len(),
            cfg.n_samples,
            mean_acceptance
        ),
    )
}

/// Emulator accuracy on the clean test set and calibration summaries.
pub fn cmd_evaluate(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let mut run = StageRun::begin(cfg, EVALUATE, force)?;
    let bundle = load_bundle(&run.store)?;
    let test_design = load_design(&run.store, DesignKind::Test)?;
    let test_log = log_transform(&load_raw(&run.store, "test_raw", &test_design)?)?;
    let emulator = EmulatorReport::compute(&bundle, &test_log)?;

    let cases: Vec<CaseRecord> = serde_json::from_slice(&run.store.read_file(SUMMARIES_FILE)?)?;
    for suite in Suite::ALL {
        for k in 0..test_design.len() {
            if !cases.iter().any(|c| c.suite == suite && c.index == k) {
                return Err(Error::Missing(format!(
                    "calibration result for case {} is missing; run `{}`",
                    suite.case_name(k),
                    command_for(CALIBRATE)
                )));
            }
        }
    }
    let calibration = CalibrationReport { cases };

    // Samples for the pairwise plots: the worst test case and one other.
    let worst = calibration
        .worst_case(Suite::Test)
        .map(|c| c.index)
        .ok_or_else(|| Error::Missing("no test-suite calibration results".into()))?;
    let mut rng = seeded(derive_seed(cfg.seeds.mcmc, PAIRWISE_STREAM));
    let mut other = rng.random_range(0..test_design.len() - 1);
    if other >= worst {
        other += 1;
    }
    let mut pairwise = Vec::new();
    for k in [worst, other] {
        let bytes = run.store.read_file(&chain_file(Suite::Test, k))?;
        pairwise.push((Suite::Test.case_name(k), read_chain_samples(bytes.as_slice())?));
    }

    let dir = run.store.root().join(REPORT_DIR);
    let summary = build_reports(&dir, &emulator, &calibration, &pairwise)?;
    let mut outputs = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if !name.ends_with(".tmp") {
            outputs.push(format!("{REPORT_DIR}/{name}"));
        }
    }
    outputs.sort();
    for rel in &outputs {
        run.store.register_file(rel)?;
    }
    let [t, rho, na] = summary.test_cases_within_tolerance;
    run.finish(
        outputs,
        format!(
            "emulator: {:.2}% of cells within 2%, R2 > 0.9 at {:.2}% of bins; \
             calibration: sodium {na}/{n}, T {t}/{n}, density {rho}/{n} within tolerance",
            100.0 * summary.emulator_fraction_within_2pct,
            100.0 * summary.emulator_fraction_r2_above_0_9,
            n = summary.test_cases
        ),
    )
}

/// Every stage in order. `on_stage` sees each outcome with its wall time
/// as soon as the stage finishes.
pub fn run_all(
    cfg: &PipelineConfig,
    force: bool,
    mut on_stage: impl FnMut(&StageOutcome, Duration),
) -> Result<Vec<StageOutcome>> {
    let mut out = Vec::new();
    let mut record = |outcome: StageOutcome, start: Instant| {
        on_stage(&outcome, start.elapsed());
        out.push(outcome);
    };
    for kind in [DesignKind::Training, DesignKind::Test] {
        let start = Instant::now();
        for o in cmd_design(cfg, Some(kind), force)? {
            record(o, start);
        }
    }
    let start = Instant::now();
    record(cmd_simulate(cfg, force)?, start);
    let start = Instant::now();
    record(cmd_reduce(cfg, force)?, start);
    let start = Instant::now();
    record(cmd_fit(cfg, force)?, start);
    let start = Instant::now();
    record(cmd_calibrate(cfg, CaseSelection::All, force)?, start);
    let start = Instant::now();
    record(cmd_evaluate(cfg, force)?, start);
    Ok(out)
}

/// Clean log-scale test spectra and their design, for callers that want to
/// recompute metrics from a finished store.
pub fn load_test_log(store: &ArtifactStore) -> Result<SpectrumSet> {
    let design = load_design(store, DesignKind::Test)?;
    log_transform(&load_raw(store, "test_raw", &design)?)
}

/// Raw training spectra as a matrix (bins by runs).
pub fn load_training_raw(store: &ArtifactStore) -> Result<DMatrix<f64>> {
    store.read_matrix("train_raw")
}

