//! The pipeline configuration file (TOML) and dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::GridSearchSpec;
use crate::detector::{DetectorConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::AreaVerdictSpec;
use crate::forge::{DatasetSpec, ForgeSpec};
use crate::glcm::GlcmSpec;
use crate::grid::{GridSpec, SamplerSpec};
use crate::volume::NormalizationSpec;

/// Environment variable that overrides `paths.root`.
pub const ROOT_ENV: &str = "CTFORENSICS_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub root: PathBuf,
    pub dataset: PathBuf,
    pub models: PathBuf,
    pub heatmaps: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            dataset: PathBuf::from("dataset"),
            models: PathBuf::from("models"),
            heatmaps: PathBuf::from("heatmaps"),
            reports: PathBuf::from("reports"),
        }
    }
}

impl PathsConfig {
    fn under(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.under(&self.dataset)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.under(&self.models)
    }

    pub fn heatmaps_dir(&self) -> PathBuf {
        self.under(&self.heatmaps)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.under(&self.reports)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.models_dir().join("detector.json")
    }

    pub fn bundle(&self) -> PathBuf {
        self.models_dir().join("global.ctgm")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub dims: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { dims: 256 }
    }
}

/// `n` positive slices within `m` consecutive ones mark a scan as tampered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanRule {
    pub n: usize,
    pub m: usize,
}

impl Default for ScanRule {
    fn default() -> Self {
        Self { n: 9, m: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub grid: GridSpec,
    pub sampler: SamplerSpec,
    pub normalization: NormalizationSpec,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub glcm: GlcmSpec,
    pub pca: PcaConfig,
    pub search: GridSearchSpec,
    pub area: AreaVerdictSpec,
    pub scan_rule: ScanRule,
    pub dataset: DatasetSpec,
    pub forge: ForgeSpec,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.sampler.validate()?;
        self.normalization.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        self.glcm.validate()?;
        self.search.validate()?;
        self.area.validate()?;
        self.forge.validate()?;
        self.dataset_spec().validate()?;
        if self.detector.input_size != self.grid.img_size {
            return Err(Error::Config(format!(
                "detector.input_size {} differs from grid.img_size {}",
                self.detector.input_size, self.grid.img_size
            )));
        }
        if self.pca.dims == 0 {
            return Err(Error::Config("pca.dims must be positive".into()));
        }
        if self.scan_rule.n == 0 || self.scan_rule.n > self.scan_rule.m {
            return Err(Error::Config(format!(
                "scan_rule needs 1 <= n <= m, got n={} m={}",
                self.scan_rule.n, self.scan_rule.m
            )));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            forge: self.forge,
            ..self.dataset.clone()
        }
    }

    /// Parses TOML text, applies `key.path=value` overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file (or the defaults when `path` is `None`). The
    /// root directory comes from the environment when `CTFORENSICS_ROOT` is set.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Ok(root) = std::env::var(ROOT_ENV) {
            if !root.is_empty() {
                cfg.paths.root = PathBuf::from(root);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }
}

/// Sets `a.b.c=value` in a TOML table. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
