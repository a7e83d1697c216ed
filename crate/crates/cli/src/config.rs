//! Run configuration: a JSON file with `model` and `train` sections, both
//! optional and defaulted, plus `CTLPLANE_<KEY>` environment overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ctlplane_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_PREFIX: &str = "CTLPLANE_";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Loads `path` (or the defaults), applies environment overrides and
    /// validates both sections.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        // Round-trip through the typed form first so that the schema (unknown
        // keys included) is checked before any override is applied.
        let typed: RunConfig = serde_json::from_value(value.clone()).context("config does not match the schema")?;
        value = serde_json::to_value(typed)?;
        apply_env(&mut value, std::env::vars())?;
        let cfg: RunConfig = serde_json::from_value(value).context("config overrides do not match the schema")?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

/// Sets `model.<key>` or `train.<key>` from every `CTLPLANE_<KEY>` variable.
/// Values are parsed as JSON, falling back to a plain string.
pub fn apply_env(value: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    for (name, raw) in vars {
        let Some(key) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let key = key.to_lowercase();
        let parsed = serde_json::from_str::<Value>(&raw).unwrap_or(Value::String(raw.clone()));
        let mut hit = false;
        for section in ["model", "train"] {
            let obj = value
                .get_mut(section)
                .and_then(Value::as_object_mut)
                .ok_or_else(|| anyhow!("config section {section} missing"))?;
            if let Some(slot) = obj.get_mut(&key) {
                *slot = parsed.clone();
                hit = true;
            }
        }
        if !hit {
            bail!("{name} does not name a config key (see `ctlplane print-config`)");
        }
    }
    Ok(())
}
