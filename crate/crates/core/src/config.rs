//! Experiment configuration: a single TOML file with CLI-overridable keys.

use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};
use crate::lifting::StageSpec;
use crate::snapshots::ColumnSchema;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; overrides the synthetic spec seed when set.
    pub seed: Option<u64>,
    /// Output directory; the CLI `--out` flag takes precedence.
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub lifting: LiftingConfig,
    pub regression: RegressionConfig,
    pub solver: SolverConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `"file"` or `"synthetic"`.
    pub source: String,
    /// Episode CSV path for `source = "file"`.
    pub path: Option<PathBuf>,
    pub episode_column: String,
    pub time_column: String,
    /// Empty: auto-detect `x0, x1, ...`.
    pub state_columns: Vec<String>,
    /// Empty: auto-detect `u0, u1, ...`.
    pub input_columns: Vec<String>,
    /// Generator spec for `source = "synthetic"`.
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "file".into(),
            path: None,
            episode_column: "episode".into(),
            time_column: "t".into(),
            state_columns: Vec::new(),
            input_columns: Vec::new(),
            synthetic: None,
        }
    }
}

impl DataConfig {
    pub fn schema(&self) -> ColumnSchema {
        ColumnSchema {
            episode: self.episode_column.clone(),
            time: self.time_column.clone(),
            states: self.state_columns.clone(),
            inputs: self.input_columns.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Training episode ids; empty means every episode not in `test_episodes`.
    pub train_episodes: Vec<u64>,
    pub test_episodes: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LiftingConfig {
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    /// One of: `edmd`, `edmd-lmi`, `tikhonov`, `stability`, `hinf`,
    /// `dmdc`, `dmdc-lmi`, `dmdc-stability`, `dmdc-hinf`.
    pub method: String,
    /// Tikhonov coefficient.
    pub alpha: f64,
    /// Spectral radius bound of the stability-constrained fits.
    pub rho_bar: f64,
    /// H-infinity regularization coefficient.
    pub beta: f64,
    /// SVD rank of the ThetaPlus basis; 0 selects the optimal hard threshold.
    pub r_hat: usize,
    /// SVD rank of the Psi basis; 0 selects the full numerical rank.
    pub r_til: usize,
    pub weight: Option<WeightConfig>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            method: "edmd".into(),
            alpha: 0.0,
            rho_bar: 0.99,
            beta: 7.5e-3,
            r_hat: 0,
            r_til: 0,
            weight: None,
        }
    }
}

/// First-order highpass weighting filter applied after the Koopman system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub f_zero_hz: f64,
    pub f_pole_hz: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            f_zero_hz: 4.0,
            f_pole_hz: 5.7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: u32,
    pub time_limit_s: f64,
    pub margin_coeff: f64,
    pub bmi_tol: f64,
    pub bmi_max_iter: usize,
    /// Write each semidefinite program in the sparse text dump format.
    pub dump_problems: bool,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            time_limit_s: 300.0,
            margin_coeff: 1e-9,
            bmi_tol: 1e-4,
            bmi_max_iter: 40,
            dump_problems: false,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub bode_points: usize,
    /// Upper Bode frequency in Hz; 0 means the Nyquist frequency.
    pub f_max_hz: f64,
    /// Relative tolerance of post-hoc H-infinity norm computations.
    pub hinf_tol: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bode_points: 256,
            f_max_hz: 0.0,
            hinf_tol: 1e-4,
        }
    }
}

pub const METHODS: &[&str] = &[
    "edmd",
    "edmd-lmi",
    "tikhonov",
    "stability",
    "hinf",
    "dmdc",
    "dmdc-lmi",
    "dmdc-stability",
    "dmdc-hinf",
];

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Apply a repeatable `--set key=value` override with dotted paths, e.g.
    /// `regression.beta=0.01` or `data.source="synthetic"`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
        let mut doc: toml::Value = toml::Value::try_from(&*self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
            Ok(toml::Value::Table(t)) => t
                .into_iter()
                .next()
                .map(|(_, v)| v)
                .unwrap_or_else(|| toml::Value::String(raw.to_string())),
            _ => toml::Value::String(raw.to_string()),
        };
        let mut cursor = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{key}': '{part}' is not a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed);
                break;
            }
            cursor = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = doc
            .try_into()
            .map_err(|e| Error::Config(format!("override '{spec}': {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.source.as_str() {
            "file" => {
                let path = self.data.path.as_ref().ok_or_else(|| {
                    Error::Config("data.source = \"file\" requires data.path".into())
                })?;
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "data file '{}' does not exist",
                        path.display()
                    )));
                }
            }
            "synthetic" => {
                if self.data.synthetic.is_none() {
                    return Err(Error::Config(
                        "data.source = \"synthetic\" requires [data.synthetic]".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown data.source '{other}' (expected \"file\" or \"synthetic\")"
                )));
            }
        }
        if !METHODS.contains(&self.regression.method.as_str()) {
            return Err(Error::Config(format!(
                "unknown regression.method '{}' (expected one of {METHODS:?})",
                self.regression.method
            )));
        }
        if self.regression.alpha < 0.0 {
            return Err(Error::Config("regression.alpha must be nonnegative".into()));
        }
        if !(self.regression.rho_bar > 0.0 && self.regression.rho_bar <= 1.0) {
            return Err(Error::Config("regression.rho_bar must lie in (0, 1]".into()));
        }
        if self.regression.beta <= 0.0
            && matches!(self.regression.method.as_str(), "hinf" | "dmdc-hinf")
        {
            return Err(Error::Config("regression.beta must be positive".into()));
        }
        Ok(())
    }
}
