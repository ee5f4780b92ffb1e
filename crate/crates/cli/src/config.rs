//! JSON run configuration. Precedence is flag > file > built-in default; the
//! commands apply their flags on top of what [`RunConfig::load`] returns.

use std::fs;
use std::path::{Path, PathBuf};

use octcast::oct::ModelConfig;
use octcast::pipeline::{AnticipationConfig, ForecastOptions, TrainConfig};
use octcast::synthdata::SynthConfig;
use octcast::tokens::TokenCategory;
use octcast::Weights;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub forecast: ForecastOptions,
    pub anticipation: AnticipationConfig,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), read_json)
    }
}

pub fn load_synth(path: Option<&Path>) -> CliResult<SynthConfig> {
    path.map_or_else(|| Ok(SynthConfig::default()), read_json)
}

/// Architecture and token ablation stored next to a weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub ablate: Vec<TokenCategory>,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, w: &Weights, meta: &ModelMeta) -> CliResult<()> {
    w.save(path)?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta).map_err(octcast::Error::from)?;
    fs::write(&side, text + "\n").map_err(io_err(side))
}

pub fn load_model(path: &Path) -> CliResult<(Weights, ModelMeta)> {
    if !path.exists() {
        return Err(CliError::Io { path: path.into(), source: std::io::ErrorKind::NotFound.into() });
    }
    let w = Weights::load(path)?;
    let meta: ModelMeta = read_json(&sidecar_path(path))?;
    octcast::oct::check_weights(&meta.model, &w)?;
    Ok((w, meta))
}

/// `"32"` or `"24x32"` (rows × cols).
pub fn parse_grid(s: &str) -> Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse::<usize>()).collect();
    match nums.as_deref() {
        Ok([n]) if *n > 0 => Ok([*n, *n]),
        Ok([h, w]) if *h > 0 && *w > 0 => Ok([*h, *w]),
        _ => Err(format!("invalid grid `{s}`, expected N or HxW")),
    }
}
