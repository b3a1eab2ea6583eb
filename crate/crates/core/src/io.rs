//! Configuration files, tabular data and model files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Dataset, Inputs, PriorConfig};
use crate::tailfree::{ModelTree, TreeSpec};
use crate::vi::{OptimizerConfig, VariationalState};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Column roles in a data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub features: Vec<String>,
    pub target: String,
    pub base_predictions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub n_samples: usize,
    pub include_noise: bool,
    pub quantiles: Vec<f64>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        let d = crate::model::PredictOptions::default();
        Self {
            n_samples: d.n_samples,
            include_noise: d.include_noise,
            quantiles: d.quantiles,
        }
    }
}

/// Everything a command can read from a run config. Every section is
/// optional; absent sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: Option<DataConfig>,
    /// Tree over the base-prediction column names; flat when absent.
    pub tree: Option<TreeSpec>,
    pub priors: PriorConfig,
    pub optimizer: OptimizerConfig,
    /// Add the CRPS term to the objective.
    pub calibrate: bool,
    pub predict: PredictConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: None,
            tree: None,
            priors: PriorConfig::default(),
            optimizer: OptimizerConfig::default(),
            calibrate: true,
            predict: PredictConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.priors.validate().map_err(|e| as_config("priors", e))?;
        cfg.optimizer.validate().map_err(|e| as_config("optimizer", e))?;
        Ok(cfg)
    }

    /// Reads a config; relative data and output paths are resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            rebase(&mut d.path);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            rebase(o);
        }
        Ok(cfg)
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| Error::Config {
            path: "data".into(),
            message: "missing section".into(),
        })
    }

    pub fn build_tree(&self) -> Result<ModelTree> {
        let names = &self.data()?.base_predictions;
        match &self.tree {
            None => ModelTree::flat(names),
            Some(spec) => ModelTree::from_spec(spec, names),
        }
    }
}

fn as_config(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(message) => Error::Config {
            path: section.into(),
            message,
        },
        other => other,
    }
}

/// A delimited text file with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub records: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Data {
            row: 0,
            column: String::new(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_reader(file)
    }

    /// Every record must have as many fields as the header.
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| data_err(0, "", e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut records = vec![];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| data_err(i + 1, "", e))?;
            records.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, records })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Names among `wanted` that are not columns of the table.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        wanted
            .into_iter()
            .filter(|n| self.column_index(n).is_none())
            .cloned()
            .collect()
    }

    /// `rows x names.len()` matrix. Data rows are numbered from 1.
    pub fn numeric(&self, names: &[String]) -> Result<Matrix<f64>> {
        let missing = self.missing(names);
        if !missing.is_empty() {
            return Err(Error::SchemaMismatch { missing });
        }
        let idx: Vec<usize> = names.iter().map(|n| self.column_index(n).unwrap_or(0)).collect();
        let mut out = Matrix::zeros(self.records.len(), names.len());
        for (i, rec) in self.records.iter().enumerate() {
            for (j, &c) in idx.iter().enumerate() {
                let cell = &rec[c];
                let v: f64 = cell.parse().map_err(|_| Error::Data {
                    row: i + 1,
                    column: names[j].clone(),
                    message: format!("`{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Data {
                        row: i + 1,
                        column: names[j].clone(),
                        message: format!("`{cell}` is not finite"),
                    });
                }
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    pub fn inputs(&self, features: &[String], base: &[String]) -> Result<Inputs> {
        let missing = self.missing(features.iter().chain(base));
        if !missing.is_empty() {
            return Err(Error::SchemaMismatch { missing });
        }
        Inputs::new(self.numeric(features)?, self.numeric(base)?)
    }

    pub fn dataset(&self, cols: &DataConfig) -> Result<Dataset> {
        let missing = self.missing(cols.features.iter().chain(&cols.base_predictions).chain([&cols.target]));
        if !missing.is_empty() {
            return Err(Error::SchemaMismatch { missing });
        }
        let inputs = self.inputs(&cols.features, &cols.base_predictions)?;
        let y = self.numeric(std::slice::from_ref(&cols.target))?.col(0);
        Dataset::new(inputs.features, y, inputs.base_predictions)
    }
}

/// Dataset named by a config: a missing column is a config error.
pub fn load_dataset(cols: &DataConfig) -> Result<Dataset> {
    let table = Table::read(&cols.path)?;
    table.dataset(cols).map_err(|e| match e {
        Error::SchemaMismatch { missing } => Error::Config {
            path: "data".into(),
            message: format!("column(s) not found in {}: {}", cols.path.display(), missing.join(", ")),
        },
        other => other,
    })
}

fn data_err(row: usize, column: &str, e: csv::Error) -> Error {
    Error::Data {
        row,
        column: column.into(),
        message: e.to_string(),
    }
}

/// Writes a header and rows of numbers as CSV.
pub fn write_csv(path: &Path, headers: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(vec![]);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(headers).map_err(ser)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub const MODEL_FORMAT: &str = "tailfree-model";
pub const MODEL_VERSION: u32 = 1;

/// Self-describing fitted model: column roles, the settings used to fit,
/// and the full variational state (tree, kernels, parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub features: Vec<String>,
    pub target: String,
    pub base_predictions: Vec<String>,
    pub optimizer: OptimizerConfig,
    pub calibrate: bool,
    pub converged: bool,
    pub state: VariationalState,
    /// Free-form provenance, e.g. the training file.
    pub meta: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn new(
        cols: &DataConfig,
        optimizer: OptimizerConfig,
        calibrate: bool,
        converged: bool,
        state: VariationalState,
    ) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            features: cols.features.clone(),
            target: cols.target.clone(),
            base_predictions: cols.base_predictions.clone(),
            optimizer,
            calibrate,
            converged,
            state,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header = serde_json::from_slice(bytes).map_err(|e| Error::UnsupportedModel(e.to_string()))?;
        if h.format != MODEL_FORMAT {
            return Err(Error::UnsupportedModel(format!("format `{}`", h.format)));
        }
        if h.version != MODEL_VERSION {
            return Err(Error::UnsupportedModel(format!(
                "version {} (supported: {MODEL_VERSION})",
                h.version
            )));
        }
        let m: ModelFile = serde_json::from_slice(bytes).map_err(|e| Error::UnsupportedModel(e.to_string()))?;
        m.state.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn data_config(&self, path: PathBuf) -> DataConfig {
        DataConfig {
            path,
            features: self.features.clone(),
            target: self.target.clone(),
            base_predictions: self.base_predictions.clone(),
        }
    }
}
