use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specal_core::design::DesignKind;
use specal_core::pipeline::stages::{
    cmd_calibrate, cmd_design, cmd_evaluate, cmd_fit, cmd_reduce, cmd_simulate, run_all,
};
use specal_core::pipeline::{CaseSelection, PipelineConfig, StageOutcome};
use specal_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INTEGRITY: u8 = 3;

#[derive(Parser)]
#[command(name = "specal", version, about = "Emulator-based Bayesian calibration of emission spectra")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file. Flags win.
#[derive(Args)]
struct Common {
    /// JSON config file; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed_design_train: Option<u64>,
    #[arg(long, global = true)]
    seed_design_test: Option<u64>,
    #[arg(long, global = true)]
    seed_noise: Option<u64>,
    #[arg(long, global = true)]
    seed_mcmc: Option<u64>,
    #[arg(long, global = true)]
    seed_mle: Option<u64>,
    /// Number of principal components kept.
    #[arg(long, global = true)]
    q: Option<usize>,
    /// Observation precision on the standardized scale.
    #[arg(long, global = true)]
    lambda_y: Option<f64>,
    /// Posterior samples per chain after burn-in.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Run even if predecessor artifacts came from different settings.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Training,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Build Latin hypercube designs (both unless --kind is given).
    Design {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Number of design points for the chosen kind.
        #[arg(long, requires = "kind")]
        m: Option<usize>,
        /// Design seed for the chosen kind.
        #[arg(long, requires = "kind")]
        seed: Option<u64>,
    },
    /// Run the forward model over both designs.
    Simulate,
    /// Standardize the training spectra and compute the reduced basis.
    Reduce,
    /// Fit one Gaussian process per component weight.
    Fit,
    /// Sample posteriors for noisy observations.
    Calibrate {
        /// all, test, na, cu, or a single test index.
        #[arg(long, default_value = "all")]
        case: String,
    },
    /// Write emulator and calibration reports.
    Evaluate,
    /// Every stage in order.
    RunAll,
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let s = &mut cfg.seeds;
    for (flag, slot) in [
        (common.seed_design_train, &mut s.design_train),
        (common.seed_design_test, &mut s.design_test),
        (common.seed_noise, &mut s.noise),
        (common.seed_mcmc, &mut s.mcmc),
        (common.seed_mle, &mut s.mle),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(q) = common.q {
        cfg.q = q;
    }
    if let Some(l) = common.lambda_y {
        cfg.lambda_y = l;
    }
    if let Some(n) = common.samples {
        cfg.n_samples = n;
    }
    Ok(cfg)
}

fn configure_workers() -> Result<(), String> {
    let Ok(v) = std::env::var("SPECAL_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SPECAL_WORKERS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn print(outcome: &StageOutcome, secs: f64) {
    println!("{:<16} {:>8.1}s  {}", outcome.stage, secs, outcome.summary);
}

fn run(cli: Cli, mut cfg: PipelineConfig) -> Result<(), Error> {
    let force = cli.common.force;
    let start = Instant::now();
    let outcomes = match cli.command {
        Command::Design { kind, m, seed } => {
            let kind = kind.map(|k| match k {
                Kind::Training => DesignKind::Training,
                Kind::Test => DesignKind::Test,
            });
            match kind {
                Some(DesignKind::Training) => {
                    cfg.m_train = m.unwrap_or(cfg.m_train);
                    cfg.seeds.design_train = seed.unwrap_or(cfg.seeds.design_train);
                }
                Some(DesignKind::Test) => {
                    cfg.m_test = m.unwrap_or(cfg.m_test);
                    cfg.seeds.design_test = seed.unwrap_or(cfg.seeds.design_test);
                }
                None => {}
            }
            cmd_design(&cfg, kind, force)?
        }
        Command::Simulate => vec![cmd_simulate(&cfg, force)?],
        Command::Reduce => vec![cmd_reduce(&cfg, force)?],
        Command::Fit => vec![cmd_fit(&cfg, force)?],
        Command::Calibrate { case } => vec![cmd_calibrate(&cfg, case.parse::<CaseSelection>()?, force)?],
        Command::Evaluate => vec![cmd_evaluate(&cfg, force)?],
        Command::RunAll => {
            run_all(&cfg, force, |o, d| print(o, d.as_secs_f64()))?;
            println!("{:<16} {:>8.1}s", "total", start.elapsed().as_secs_f64());
            return Ok(());
        }
    };
    let secs = start.elapsed().as_secs_f64();
    for o in &outcomes {
        print(o, secs);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let cfg = match load_config(&cli.common).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                ref e if e.is_integrity() => EXIT_INTEGRITY,
                Error::Domain(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            })
        }
    }
}
