//! On-disk artifact layout: `manifest.json` plus raw little-endian `f64`
//! arrays under `arrays/`, each checked by length and CRC32 on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::emulator::{EmulatorBundle, GpHyperParams, Provenance};
use crate::error::{Error, Result};
use crate::model::{ParameterPoint, WavelengthGrid, PARAM_DIM};
use crate::reduction::{Basis, StandardizationStats};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const ARRAY_DIR: &str = "arrays";

/// Write `bytes` to `path` via a temporary sibling file and a rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    /// Path relative to the store root.
    pub file: String,
    /// Row-major shape.
    pub shape: Vec<usize>,
    pub byte_len: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub byte_len: u64,
    pub crc32: u32,
}

/// What one pipeline stage produced and from which settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Chained hash of this stage's settings and its predecessors' hashes.
    pub hash: String,
    pub params: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleRecord {
    pub q: usize,
    pub hyperparameters: Vec<GpHyperParams>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
    pub arrays: BTreeMap<String, ArrayEntry>,
    pub files: BTreeMap<String, FileEntry>,
    pub bundle: Option<BundleRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: String::new(),
            seeds: BTreeMap::new(),
            stages: BTreeMap::new(),
            arrays: BTreeMap::new(),
            files: BTreeMap::new(),
            bundle: None,
        }
    }
}

fn encode(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
        .collect()
}

/// Row-major copy of a (column-major) matrix.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// A directory of pipeline artifacts and its manifest.
#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    manifest: Manifest,
}

impl ArtifactStore {
    /// Open `root`, reading its manifest if there is one.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = fs::read(&path)?;
            let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| {
                Error::Integrity(format!("{} is not valid JSON: {e}", path.display()))
            })?;
            let found = value.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| {
                Error::Integrity(format!("{} has no schema_version", path.display()))
            })?;
            if found != u64::from(SCHEMA_VERSION) {
                return Err(Error::SchemaVersion {
                    expected: SCHEMA_VERSION,
                    found: found as u32,
                });
            }
            serde_json::from_value(value)
                .map_err(|e| Error::Integrity(format!("{} is malformed: {e}", path.display())))?
        } else {
            Manifest::default()
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn save_manifest(&self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.root.join(MANIFEST_FILE), &bytes)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.manifest.stages.get(name)
    }

    pub fn record_stage(&mut self, name: &str, record: StageRecord) {
        self.manifest.stages.insert(name.to_string(), record);
    }

    /// Store a row-major array of the given shape.
    pub fn write_array(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::domain(format!(
                "array {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let file = format!("{ARRAY_DIR}/{name}.f64");
        let bytes = encode(data);
        write_atomic(&self.root.join(&file), &bytes)?;
        self.manifest.arrays.insert(
            name.to_string(),
            ArrayEntry {
                file,
                shape: shape.to_vec(),
                byte_len: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
            },
        );
        Ok(())
    }

    pub fn write_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        self.write_array(name, &[m.nrows(), m.ncols()], &row_major(m))
    }

    /// Read an array, verifying its length and checksum.
    pub fn read_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self.manifest.arrays.get(name).ok_or_else(|| {
            Error::Missing(format!("array '{name}' is not listed in the manifest"))
        })?;
        let path = self.root.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| {
            Error::Integrity(format!("cannot read array file {}: {e}", path.display()))
        })?;
        let expected = entry.shape.iter().product::<usize>() as u64 * 8;
        if bytes.len() as u64 != entry.byte_len || entry.byte_len != expected {
            return Err(Error::Integrity(format!(
                "array '{name}' has {} bytes, manifest expects {} (shape {:?})",
                bytes.len(),
                entry.byte_len,
                entry.shape
            )));
        }
        let crc = crc32fast::hash(&bytes);
        if crc != entry.crc32 {
            return Err(Error::Integrity(format!(
                "array '{name}' checksum {crc:08x} does not match manifest {:08x}",
                entry.crc32
            )));
        }
        Ok((entry.shape.clone(), decode(&bytes)))
    }

    pub fn read_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (shape, data) = self.read_array(name)?;
        if shape.len() != 2 {
            return Err(Error::Integrity(format!("array '{name}' is not two-dimensional")));
        }
        Ok(DMatrix::from_row_slice(shape[0], shape[1], &data))
    }

    pub fn read_vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, data) = self.read_array(name)?;
        if shape.len() != 1 {
            return Err(Error::Integrity(format!("array '{name}' is not one-dimensional")));
        }
        Ok(data)
    }

    /// Write a non-array output file (relative path) and record its checksum.
    pub fn write_file(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.manifest.files.insert(
            rel.to_string(),
            FileEntry {
                byte_len: bytes.len() as u64,
                crc32: crc32fast::hash(bytes),
            },
        );
        Ok(())
    }

    /// Read a recorded output file, verifying length and checksum.
    pub fn read_file(&self, rel: &str) -> Result<Vec<u8>> {
        let entry = self
            .manifest
            .files
            .get(rel)
            .ok_or_else(|| Error::Missing(format!("file '{rel}' is not listed in the manifest")))?;
        let bytes = fs::read(self.root.join(rel))
            .map_err(|e| Error::Integrity(format!("cannot read {rel}: {e}")))?;
        if bytes.len() as u64 != entry.byte_len || crc32fast::hash(&bytes) != entry.crc32 {
            return Err(Error::Integrity(format!("{rel} does not match its manifest checksum")));
        }
        Ok(bytes)
    }

    /// Record a file written elsewhere (e.g. by a report writer).
    pub fn register_file(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.root.join(rel))?;
        self.manifest.files.insert(
            rel.to_string(),
            FileEntry {
                byte_len: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
            },
        );
        Ok(())
    }
}

pub const BUNDLE_ARRAYS: [&str; 7] = ["K", "W", "mu", "sigma", "wavelengths", "training_inputs", "singular_values"];

/// Store the basis and standardization arrays shared by the reduce and fit
/// stages.
pub fn save_reduction(store: &mut ArtifactStore, basis: &Basis, stats: &StandardizationStats) -> Result<()> {
    store.write_matrix("K", basis.k())?;
    store.write_matrix("W", basis.w())?;
    store.write_array("mu", &[stats.mean.len()], &stats.mean)?;
    store.write_array("sigma", &[1], &[stats.scale])?;
    store.write_array("singular_values", &[basis.singular_values().len()], basis.singular_values())?;
    Ok(())
}

pub fn load_reduction(store: &ArtifactStore) -> Result<(Basis, StandardizationStats)> {
    let basis = Basis::from_parts(
        store.read_matrix("K")?,
        store.read_matrix("W")?,
        store.read_vector("singular_values")?,
    )?;
    let sigma = store.read_vector("sigma")?;
    if sigma.len() != 1 {
        return Err(Error::Integrity("sigma must hold one value".into()));
    }
    let stats = StandardizationStats::new(store.read_vector("mu")?, sigma[0])?;
    Ok((basis, stats))
}

/// Persist a fitted bundle: matrices as arrays, hyperparameters in the
/// manifest. The manifest itself is written by the caller.
pub fn save_bundle(bundle: &EmulatorBundle, store: &mut ArtifactStore) -> Result<()> {
    save_reduction(store, bundle.basis(), bundle.stats())?;
    store.write_array("wavelengths", &[bundle.grid().len()], bundle.grid().values())?;
    let inputs: Vec<f64> = bundle.training_inputs().iter().flat_map(|t| *t.coords()).collect();
    store.write_array("training_inputs", &[inputs.len() / PARAM_DIM, PARAM_DIM], &inputs)?;
    store.manifest_mut().bundle = Some(BundleRecord {
        q: bundle.q(),
        hyperparameters: bundle.hyperparameters(),
        provenance: bundle.provenance().clone(),
    });
    Ok(())
}

/// Rebuild a bundle from a store. The GP factorisations are recomputed from
/// the stored inputs and hyperparameters, which is deterministic, so
/// predictions match the saved bundle bit for bit.
pub fn load_bundle(store: &ArtifactStore) -> Result<EmulatorBundle> {
    let record = store
        .manifest()
        .bundle
        .clone()
        .ok_or_else(|| Error::Missing("no fitted emulator in this store; run `specal fit` first".into()))?;
    let (basis, stats) = load_reduction(store)?;
    if record.q != basis.q() || record.hyperparameters.len() != record.q {
        return Err(Error::Integrity(format!(
            "bundle records q = {} with {} hyperparameter sets, basis has rank {}",
            record.q,
            record.hyperparameters.len(),
            basis.q()
        )));
    }
    let grid = Arc::new(WavelengthGrid::new(store.read_vector("wavelengths")?)?);
    let (shape, flat) = store.read_array("training_inputs")?;
    if shape != [basis.n_runs(), PARAM_DIM] {
        return Err(Error::Integrity(format!("training_inputs has shape {shape:?}")));
    }
    let inputs = flat
        .chunks_exact(PARAM_DIM)
        .map(ParameterPoint::from_slice)
        .collect::<Result<Vec<_>>>()?;
    EmulatorBundle::from_hyperparameters(&inputs, basis, stats, grid, record.hyperparameters, record.provenance)
}
