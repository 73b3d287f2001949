use std::path::{Path, PathBuf};

use anyhow::Context as _;
use gfcn::data::ResizeMode;
use gfcn::model::ArchitectureConfig;
use gfcn::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Paths are relative to the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub charset: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub resize: ResizeMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub training: TrainConfig,
    pub data: Option<DataSection>,
}

impl RunConfigFile {
    /// Parses and validates every section, resolving data paths against the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.data.as_mut() {
            for p in [&mut d.charset, &mut d.train, &mut d.valid] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn data(&self) -> anyhow::Result<&DataSection> {
        self.data.as_ref().context("config has no [data] section")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
