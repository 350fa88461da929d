//! Run-config loading: reference defaults, then the config file, then
//! `--set` overrides, then `--seed`.

use std::fmt;
use std::fs;
use std::path::Path;

use saic_core::pipeline::RunConfig;
use serde_json::{Map, Value};

/// A config that cannot be read, parsed or validated.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

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

/// Sets `a.b.c` to `raw`, read as JSON when it parses and as a string otherwise.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("--set has an empty path segment in `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(ConfigError(format!(
                    "--set {key}: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig, ConfigError> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: invalid JSON: {e}", p.display())))?;
        if !file.is_object() {
            return Err(ConfigError(format!("{}: top level must be an object", p.display())));
        }
        merge(&mut root, file);
    }
    for s in sets {
        apply_set(&mut root, s)?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root)
        .map_err(|e| ConfigError(format!("invalid config at `{}`: {}", e.path(), e.inner())))?;
    if let Some(seed) = seed {
        cfg.reseed(seed);
    }
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}
