//! TOML configuration file. Every section is optional; command-line flags
//! override the values read here.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use splinehmm::estimation::OptimizerConfig;
use splinehmm::evaluation::CvMode;
use splinehmm::io::DatasetSchema;
use splinehmm::simulation::{ScenarioConfig, ScenarioEmissions};
use splinehmm::study::StudyCv;
use splinehmm::TransitionMatrix;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<DataSection>,
    pub model: ModelSection,
    pub optimizer: Option<OptimizerConfig>,
    pub cv: CvSection,
    pub scenario: ScenarioSection,
    pub study: StudySection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub id_column: Option<String>,
    pub observations: Vec<String>,
    pub covariates: Vec<String>,
    pub interactions: Vec<(String, String)>,
    pub standardize: Vec<String>,
}

impl DataSection {
    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            id_column: self.id_column.clone(),
            observations: self.observations.clone(),
            covariates: self.covariates.clone(),
            interactions: self.interactions.clone(),
            standardize: self.standardize.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub states: Option<usize>,
    pub family: Option<Family>,
    /// One count for every dimension, or one per dimension.
    pub basis: Option<Vec<usize>>,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Spline,
    Gaussian,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub candidates: Option<Vec<usize>>,
    pub folds: Option<usize>,
    pub holdout_fraction: Option<f64>,
    pub mode: Option<CvMode>,
    pub seed: Option<u64>,
    /// Jittered restarts of each fold fit (study only).
    pub restarts: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    CopulaGamma,
    Gaussian,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub preset: Option<Preset>,
    pub tpm: Option<Vec<Vec<f64>>>,
    pub emissions: Option<ScenarioEmissions>,
    pub length: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub kld_points: Option<usize>,
    pub validity_points: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

impl ScenarioSection {
    /// Preset values, replaced by any field given in the file.
    pub fn build(&self, preset: Option<Preset>) -> Result<ScenarioConfig> {
        let mut s = match preset.or(self.preset).unwrap_or(Preset::CopulaGamma) {
            Preset::CopulaGamma => ScenarioConfig::copula_gamma_default(),
            Preset::Gaussian => ScenarioConfig::gaussian_default(),
        };
        if let Some(rows) = &self.tpm {
            s.tpm = TransitionMatrix::new(rows.clone())?;
        }
        if let Some(e) = &self.emissions {
            s.emissions = e.clone();
        }
        if let Some(v) = self.length {
            s.length = v;
        }
        if let Some(v) = self.runs {
            s.runs = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        Ok(s)
    }
}

impl CvSection {
    pub fn study_cv(&self) -> StudyCv {
        let d = StudyCv::default();
        StudyCv {
            candidates: self.candidates.clone().unwrap_or(d.candidates),
            n_folds: self.folds.unwrap_or(d.n_folds),
            holdout_fraction: self.holdout_fraction.unwrap_or(d.holdout_fraction),
            restarts: self.restarts.unwrap_or(d.restarts),
        }
    }
}

/// Expands a scalar count to every dimension.
pub fn basis_counts(counts: &[usize], dim: usize) -> Result<Vec<usize>> {
    match counts.len() {
        1 => Ok(vec![counts[0]; dim]),
        n if n == dim => Ok(counts.to_vec()),
        n => bail!("{n} basis counts given for {dim} observation dimensions"),
    }
}
