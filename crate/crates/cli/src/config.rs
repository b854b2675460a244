use std::fs;
use std::path::Path;

use tsap_core::pipeline::ExperimentConfig;

use crate::{CliError, Result};

pub const PRESETS: [&str; 3] = ["default", "smoke", "acceptance"];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "default" => Ok(ExperimentConfig::default()),
        "smoke" => Ok(ExperimentConfig::smoke()),
        "acceptance" => Ok(ExperimentConfig::acceptance()),
        _ => Err(CliError::Validation(format!(
            "unknown preset {name:?}; expected one of {}",
            PRESETS.join(", ")
        ))),
    }
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}

/// Parses and validates. Omitted keys take their defaults; unknown keys and
/// out-of-range values are rejected with the offending field named.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
