use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfmixer::data::{Format, SynthConfig};
use tfmixer::model::ModelConfig;
use tfmixer::training::TrainConfig;

use crate::error::CliError;

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "TFMIXER_OUT_DIR";

fn default_out_dir() -> PathBuf {
    PathBuf::from("tfmixer-out")
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

/// Everything a command needs, as read from `--config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Inferred from the file extension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    /// Cut time: events before it form the history, events after it become
    /// forecast targets. Samples are used as stored when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_cut: Option<f64>,
    /// Keep at most this many targets per variable after the cut.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_targets: Option<usize>,
    /// Train, validation and test fractions, taken in file order.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// `out_dir`, unless overridden from the environment.
    pub fn resolve_out_dir(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    pub fn data(&self) -> Result<(&DataConfig, &Path, Format), CliError> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::Config("missing required key `data.path`".into()))?;
        let path = data
            .path
            .as_deref()
            .ok_or_else(|| CliError::Config("missing required key `data.path`".into()))?;
        let format = match data.format {
            Some(f) => f,
            None => Format::from_path(path).ok_or_else(|| {
                CliError::Config(format!(
                    "`data.format` not set and cannot be inferred from {}",
                    path.display()
                ))
            })?,
        };
        let [a, b, c] = data.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "`data.split` must be three fractions summing to 1, got {:?}",
                data.split
            )));
        }
        Ok((data, path, format))
    }
}
