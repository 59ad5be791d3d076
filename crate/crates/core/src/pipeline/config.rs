use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emulator::DEFAULT_NUGGET;
use crate::error::{Error, Result};
use crate::surrogate::SurrogateConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub design_train: u64,
    pub design_test: u64,
    pub noise: u64,
    pub mcmc: u64,
    pub mle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            design_train: 1,
            design_test: 2,
            noise: 3,
            mcmc: 4,
            mle: 5,
        }
    }
}

impl Seeds {
    pub fn as_map(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("design_train".to_string(), self.design_train),
            ("design_test".to_string(), self.design_test),
            ("noise".to_string(), self.noise),
            ("mcmc".to_string(), self.mcmc),
            ("mle".to_string(), self.mle),
        ])
    }
}

/// Everything that determines a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Wavelength bins; overrides the surrogate's own grid size.
    pub grid_bins: usize,
    pub m_train: usize,
    pub m_test: usize,
    pub q: usize,
    pub lambda_y: f64,
    /// Posterior samples kept per chain (burn-in comes on top).
    pub n_samples: usize,
    pub seeds: Seeds,
    pub nugget: f64,
    pub mle_starts: usize,
    /// Optional surrogate parameter file; relative paths are resolved
    /// against the directory of the config file.
    pub surrogate_config: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid_bins: 2048,
            m_train: 500,
            m_test: 25,
            q: 15,
            lambda_y: 4.0,
            n_samples: 15_000,
            seeds: Seeds::default(),
            nugget: DEFAULT_NUGGET,
            mle_starts: 8,
            surrogate_config: None,
            output_dir: PathBuf::from("specal-out"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read config {}: {e}", path.display()),
            ))
        })?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = &cfg.surrogate_config {
            if p.is_relative() {
                cfg.surrogate_config = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("grid_bins", self.grid_bins),
            ("m_train", self.m_train),
            ("m_test", self.m_test),
            ("q", self.q),
            ("n_samples", self.n_samples),
            ("mle_starts", self.mle_starts),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::domain(format!("{name} must be positive")));
            }
        }
        if self.grid_bins < 2 {
            return Err(Error::domain("grid_bins must be at least 2"));
        }
        if self.m_test < 2 {
            return Err(Error::domain("m_test must be at least 2 for R^2"));
        }
        if self.q > self.m_train {
            return Err(Error::domain(format!(
                "q = {} exceeds the number of training runs {}",
                self.q, self.m_train
            )));
        }
        if !(self.lambda_y > 0.0 && self.lambda_y.is_finite()) {
            return Err(Error::domain("lambda_y must be positive"));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::domain("nugget must be non-negative"));
        }
        Ok(())
    }

    /// The surrogate settings in effect, with the grid size from `grid_bins`.
    pub fn surrogate(&self) -> Result<SurrogateConfig> {
        let mut s = match &self.surrogate_config {
            Some(p) => SurrogateConfig::from_json_file(p)?,
            None => SurrogateConfig::default(),
        };
        s.grid.bins = self.grid_bins;
        s.validate()?;
        Ok(s)
    }

    /// Hash of the complete effective configuration, output location excluded.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::json!({
            "grid_bins": self.grid_bins,
            "m_train": self.m_train,
            "m_test": self.m_test,
            "q": self.q,
            "lambda_y": self.lambda_y,
            "n_samples": self.n_samples,
            "seeds": self.seeds,
            "nugget": self.nugget,
            "mle_starts": self.mle_starts,
            "surrogate": self.surrogate()?,
        });
        Ok(sha256_hex(&[serde_json::to_vec(&value)?.as_slice()]))
    }
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}
