//! The single JSON run document shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajgp::design::ModelSpec;
use trajgp::predict::PredictConfig;
use trajgp::sampler::McmcConfig;
use trajgp::simulate::SimConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Predict,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Share of each individual's rows kept for training.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { fraction: 0.7, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub level: f64,
    /// Points per axis of the surface grid.
    pub grid: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { level: 0.95, grid: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Drop rows whose device was off for longer than this many seconds.
    pub max_inclinometer_off: f64,
    /// Keep only rows inside the 7am to 11pm window.
    pub awake_window: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { max_inclinometer_off: 5.0, awake_window: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset CSV.
    pub data: Option<PathBuf>,
    /// GPS CSV joined onto the dataset by timestamp.
    pub gps: Option<PathBuf>,
    /// Chain CSV; defaults to `chain.csv` in the output directory.
    pub chain: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub ingest: IngestConfig,
    pub model: ModelSpec,
    pub mcmc: McmcConfig,
    /// Hold out part of every individual when present.
    pub split: Option<SplitConfig>,
    pub simulate: Option<SimConfig>,
    pub predict: PredictConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.gps, &mut self.chain, &mut self.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn chain_path(&self) -> PathBuf {
        self.chain.clone().unwrap_or_else(|| self.output_dir().join("chain.csv"))
    }

    /// Applies `--seed` to every seeded stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.mcmc.seed = seed;
        self.predict.seed = seed;
        if let Some(s) = &mut self.simulate {
            s.seed = seed;
        }
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        let need = |field: &Option<PathBuf>, name: &str| {
            field.as_ref().map(|_| ()).ok_or_else(|| CliError::Config(format!("`{name}` is required for this command")))
        };
        match command {
            Command::Simulate => {
                let sim = self
                    .simulate
                    .as_ref()
                    .ok_or_else(|| CliError::Config("`simulate` section is required".into()))?;
                sim.validate()?;
            }
            Command::Fit => {
                need(&self.data, "data")?;
                self.model.validate()?;
                self.mcmc.validate()?;
            }
            Command::Predict => {
                need(&self.data, "data")?;
                self.model.validate()?;
                if !(self.predict.level > 0.0 && self.predict.level < 1.0) || self.predict.thin == 0 {
                    return Err(CliError::Config("predict.level must lie in (0, 1) and thin be positive".into()));
                }
            }
            Command::Report => {
                self.model.validate()?;
                if !(self.report.level > 0.0 && self.report.level < 1.0) || self.report.grid == 0 {
                    return Err(CliError::Config("report.level must lie in (0, 1) and grid be positive".into()));
                }
            }
        }
        if let Some(s) = &self.split {
            if !(s.fraction > 0.0 && s.fraction < 1.0) {
                return Err(CliError::Config(format!("split fraction {} outside (0, 1)", s.fraction)));
            }
        }
        if self.ingest.max_inclinometer_off.is_nan() {
            return Err(CliError::Config("ingest.max_inclinometer_off is NaN".into()));
        }
        Ok(())
    }
}
