//! CSV datasets and the versioned JSON model artifact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{pack, FitReport, ModelSpec, StopReason};
use crate::hmm::{HmmModel, Sequence, SequenceSet};

/// Format tag written into every model artifact.
pub const MODEL_FORMAT: &str = "splinehmm-model/1";

/// Column layout of an event-style CSV file: one row per (sequence, time).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSchema {
    /// Sequence identifier; without it the whole file is one sequence.
    pub id_column: Option<String>,
    pub observations: Vec<String>,
    pub covariates: Vec<String>,
    /// Products of two covariate columns, appended after the covariates.
    pub interactions: Vec<(String, String)>,
    /// Columns scaled to zero mean and unit standard deviation.
    pub standardize: Vec<String>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::invalid("schema needs at least one observation column"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in self.observations.iter().chain(&self.covariates).chain(&self.id_column) {
            if !seen.insert(c) {
                return Err(Error::invalid(format!("column `{c}` listed twice in the schema")));
            }
        }
        for (a, b) in &self.interactions {
            for c in [a, b] {
                if !self.covariates.contains(c) {
                    return Err(Error::invalid(format!("interaction column `{c}` is not a covariate")));
                }
            }
        }
        for c in &self.standardize {
            if !self.observations.contains(c) && !self.covariates.contains(c) {
                return Err(Error::invalid(format!("standardized column `{c}` is not an observation or covariate")));
            }
        }
        Ok(())
    }

    /// Names of the covariates as seen by the model, interactions included.
    pub fn model_covariates(&self) -> Vec<String> {
        let mut names = self.covariates.clone();
        names.extend(self.interactions.iter().map(|(a, b)| format!("{a}:{b}")));
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

/// Centering and scaling constants, estimated once and reused for new data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<ColumnScaling>,
}

impl Standardization {
    pub fn get(&self, column: &str) -> Option<&ColumnScaling> {
        self.columns.iter().find(|c| c.column == column)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub data: SequenceSet,
    pub standardization: Standardization,
    /// Data rows read, in file order.
    pub rows: usize,
}

/// Reads a CSV file. Sequences appear in order of first occurrence of their id
/// and rows keep file order. Empty observation cells mark a missing record;
/// standardization uses `stored` constants when given, otherwise constants
/// estimated from this file (mean and sample standard deviation of the
/// non-missing values).
pub fn load_dataset(path: &Path, schema: &DatasetSchema, stored: Option<&Standardization>) -> Result<LoadedDataset> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn {
            column: name.to_string(),
            path: path.to_path_buf(),
        })
    };
    let id_idx = schema.id_column.as_deref().map(col).transpose()?;
    let obs_idx = schema.observations.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let cov_idx = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let d = obs_idx.len();
    let p = cov_idx.len();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<Option<Vec<f64>>>, Vec<Vec<f64>>)> = HashMap::new();
    let mut rows = 0;
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = k + 2;
        rows += 1;
        let parse = |idx: usize, name: &str| -> Result<Option<f64>> {
            let raw = record.get(idx).unwrap_or("").trim();
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| Error::NonNumeric {
                    row,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
        };
        let obs = obs_idx
            .iter()
            .zip(&schema.observations)
            .map(|(&i, n)| parse(i, n))
            .collect::<Result<Vec<_>>>()?;
        let empty = obs.iter().filter(|v| v.is_none()).count();
        let obs = if empty == d {
            None
        } else if empty > 0 {
            let column = schema.observations[obs.iter().position(|v| v.is_none()).unwrap_or(0)].clone();
            return Err(Error::invalid(format!(
                "row {row}: column `{column}` is empty while other observation columns are not; \
                 a record must be fully observed or fully empty"
            )));
        } else {
            Some(obs.into_iter().flatten().collect())
        };
        let covs = cov_idx
            .iter()
            .zip(&schema.covariates)
            .map(|(&i, n)| {
                parse(i, n)?.ok_or_else(|| Error::NonNumeric {
                    row,
                    column: n.clone(),
                    value: String::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let id = id_idx.map_or_else(|| "1".to_string(), |i| record.get(i).unwrap_or("").trim().to_string());
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.0.push(obs);
        entry.1.push(covs);
    }
    if rows == 0 {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }

    // scaling constants
    let mut scaling = Vec::new();
    for name in &schema.standardize {
        let c = match stored {
            Some(s) => s.get(name).cloned().ok_or_else(|| {
                Error::invalid(format!("no stored standardization constants for column `{name}`"))
            })?,
            None => {
                let values: Vec<f64> = if let Some(j) = schema.observations.iter().position(|c| c == name) {
                    order.iter().flat_map(|id| groups[id].0.iter().flatten().map(move |r| r[j])).collect()
                } else {
                    let j = schema.covariates.iter().position(|c| c == name).expect("validated schema");
                    order.iter().flat_map(|id| groups[id].1.iter().map(move |r| r[j])).collect()
                };
                if values.len() < 2 {
                    return Err(Error::invalid(format!("column `{name}` needs two values to be standardized")));
                }
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
                if !(sd > 0.0) {
                    return Err(Error::invalid(format!("column `{name}` is constant and cannot be standardized")));
                }
                ColumnScaling {
                    column: name.clone(),
                    mean,
                    sd,
                }
            }
        };
        scaling.push(c);
    }
    let standardization = Standardization { columns: scaling };
    let scale_of = |name: &str| standardization.get(name).map(|c| (c.mean, c.sd));
    let obs_scale: Vec<Option<(f64, f64)>> = schema.observations.iter().map(|c| scale_of(c)).collect();
    let cov_scale: Vec<Option<(f64, f64)>> = schema.covariates.iter().map(|c| scale_of(c)).collect();
    let inter: Vec<(usize, usize)> = schema
        .interactions
        .iter()
        .map(|(a, b)| {
            let pos = |n: &String| schema.covariates.iter().position(|c| c == n).expect("validated schema");
            (pos(a), pos(b))
        })
        .collect();

    let sequences = order
        .iter()
        .map(|id| {
            let (obs, covs) = groups.remove(id).expect("grouped id");
            let obs = obs
                .into_iter()
                .map(|r| {
                    r.map(|v| {
                        v.iter()
                            .zip(&obs_scale)
                            .map(|(x, s)| s.map_or(*x, |(m, sd)| (x - m) / sd))
                            .collect()
                    })
                })
                .collect();
            let seq = Sequence::from_records(id.clone(), d, obs)?;
            if p == 0 {
                return Ok(seq);
            }
            let covs = covs
                .into_iter()
                .map(|r| {
                    let mut z: Vec<f64> = r
                        .iter()
                        .zip(&cov_scale)
                        .map(|(x, s)| s.map_or(*x, |(m, sd)| (x - m) / sd))
                        .collect();
                    for &(a, b) in &inter {
                        z.push(z[a] * z[b]);
                    }
                    z
                })
                .collect();
            seq.with_covariates(covs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        data: SequenceSet::new(sequences)?,
        standardization,
        rows,
    })
}

/// Summary of the fit that produced an artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub status: StopReason,
    pub support_escapes: usize,
}

impl From<&FitReport> for FitMetadata {
    fn from(r: &FitReport) -> Self {
        FitMetadata {
            log_likelihood: r.log_likelihood,
            iterations: r.iterations,
            grad_norm: r.grad_norm,
            converged: r.converged,
            status: r.status,
            support_escapes: r.support_escapes,
        }
    }
}

/// Everything needed to evaluate a fitted model on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub schema: Option<DatasetSchema>,
    pub standardization: Standardization,
    pub spec: ModelSpec,
    pub model: HmmModel,
    pub fit: Option<FitMetadata>,
}

impl ModelArtifact {
    pub fn new(spec: ModelSpec, model: HmmModel) -> Self {
        ModelArtifact {
            format: MODEL_FORMAT.to_string(),
            schema: None,
            standardization: Standardization::default(),
            spec,
            model,
            fit: None,
        }
    }
}

/// Writes the artifact as pretty-printed JSON (floats round-trip exactly).
pub fn save_model(artifact: &ModelArtifact, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(artifact).map_err(|e| Error::invalid(format!("serializing model: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
    let found = value
        .get("format")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::CorruptFile(format!("{}: no `format` tag", path.display())))?;
    if found != MODEL_FORMAT {
        return Err(Error::VersionMismatch {
            expected: MODEL_FORMAT.to_string(),
            found: found.to_string(),
        });
    }
    let artifact: ModelArtifact =
        serde_json::from_value(value).map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
    pack(&artifact.model, &artifact.spec)
        .map_err(|e| Error::CorruptFile(format!("{}: model does not match its spec ({e})", path.display())))?;
    Ok(artifact)
}
