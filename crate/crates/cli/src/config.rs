//! TOML config files: flat `key = value` pairs plus a mandatory `version`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;

pub const CONFIG_VERSION: i64 = 1;

/// Parses a config document. Unknown keys are rejected by name.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
    match table.remove("version") {
        None => bail!("config is missing the `version` key (expected version = {CONFIG_VERSION})"),
        Some(toml::Value::Integer(v)) if v == CONFIG_VERSION => {}
        Some(v) => bail!("unsupported config version {v} (expected {CONFIG_VERSION})"),
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid config: {}", e.message()))
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

/// Renders `value` as a config document that [`parse_config`] accepts.
pub fn render_config<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut table = toml::Table::try_from(value)?;
    table.insert("version".into(), toml::Value::Integer(CONFIG_VERSION));
    Ok(toml::to_string(&table)?)
}
