//! Training configuration layering: defaults < config file < `UAGS_*`
//! environment variables < command-line flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;
use uags_core::trainer::{TrainConfig, CONFIG_SCHEMA_VERSION};

pub const ENV_PREFIX: &str = "UAGS_";

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` inside `root`, which must already exist there.
fn set_path(root: &mut Value, path: &[String], value: Value, origin: &str) -> Result<()> {
    let mut node = root;
    for key in path {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| anyhow!("{origin} does not name a config field"))?;
    }
    *node = value;
    Ok(())
}

/// `UAGS_WEIGHTS__DATA=0.3` sets `weights.data`; values parse as JSON and
/// fall back to plain strings.
fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(Vec<String>, Value, String)> {
    let mut out: Vec<_> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            let value = serde_json::from_str(&v).unwrap_or(Value::String(v));
            Some((path, value, k))
        })
        .collect();
    out.sort_by(|a, b| a.2.cmp(&b.2));
    out
}

pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &[(&str, Value)],
) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        match user.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == CONFIG_SCHEMA_VERSION as u64 => {}
            Some(v) => bail!("config {}: unsupported schema_version {v}", path.display()),
            None => bail!("config {}: missing schema_version", path.display()),
        }
        merge(&mut value, user);
    }
    for (path, v, name) in env_overrides(env) {
        set_path(&mut value, &path, v, &format!("environment variable {name}"))?;
    }
    for (key, v) in flags {
        let path: Vec<String> = key.split('.').map(String::from).collect();
        set_path(&mut value, &path, v.clone(), &format!("flag for `{key}`"))?;
    }
    let cfg: TrainConfig = serde_json::from_value(value).context("invalid training config")?;
    cfg.validate()?;
    Ok(cfg)
}
