//! Config loading: defaults, then the JSON file, then `key=value` overrides.

use std::path::{Path, PathBuf};

use mhgan::train::TrainConfig;
use mhgan::{Error, Result};
use serde_json::{Map, Value};

/// Output paths that are relative resolve against this root when it is set.
pub const OUTPUT_ROOT_ENV: &str = "MHGAN_OUTPUT_ROOT";

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.into(), reason: reason.into() }
}

fn defaults() -> Map<String, Value> {
    match serde_json::to_value(TrainConfig::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config serializes as an object"),
    }
}

/// Pretty JSON of every default.
pub fn defaults_json() -> String {
    serde_json::to_string_pretty(&TrainConfig::default()).expect("defaults serialize")
}

/// `1e-4`, `true`, `{"type": ...}` parse as JSON; anything else is a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = root;
    for p in parents {
        node = match node.get_mut(*p) {
            Some(Value::Object(m)) => m,
            _ => return Err(config_err(key, format!("`{p}` is not a nested section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Builds a config. Top-level keys not in the defaults are rejected by name.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut map = defaults();
    let known: Vec<String> = map.keys().cloned().collect();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("config", format!("cannot read {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        let Value::Object(obj) = parsed else {
            return Err(config_err("config", format!("{} is not a JSON object", path.display())));
        };
        for (k, v) in obj {
            map.insert(k, v);
        }
    }
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| config_err(ov, "overrides take the form key=value"))?;
        set_path(&mut map, key, parse_value(raw))?;
    }
    if let Some(k) = map.keys().find(|k| !known.contains(k)) {
        return Err(config_err(k, "unknown key"));
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(map)).map_err(|e| config_err(&serde_key(&e.to_string()), e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Pulls the field name out of a serde message when it names one.
fn serde_key(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

pub fn resolve_output(dir: &Path, root: Option<&str>) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => Path::new(r).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mhgan::losses::LossVariant;

    fn key_of(r: Result<TrainConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_round_trip() {
        let back: TrainConfig = serde_json::from_str(&defaults_json()).unwrap();
        assert_eq!(back, TrainConfig::default());
    }

    #[test]
    fn overrides_apply_after_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"loss_variant": "ACGAN", "lambda": 0.5}"#).unwrap();
        let cfg = load(Some(&f), &["loss_variant=MHGAN".into(), "dataset.kind.k=4".into()]).unwrap();
        assert_eq!(cfg.loss_variant, LossVariant::Mhgan);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.dataset.kind, mhgan::data::DatasetKind::RingMixture { k: 4, radius: 2.0, sigma: 0.05 });
    }

    #[test]
    fn bad_keys_are_named() {
        assert_eq!(key_of(load(None, &["warp=9".into()])), "warp");
        assert_eq!(key_of(load(None, &["dataset.kind.flavor=1".into()])), "flavor");
        assert_eq!(key_of(load(None, &["lambda=-2".into()])), "lambda");
        assert_eq!(key_of(load(None, &["batch_size".into()])), "batch_size");
    }

    #[test]
    fn output_root_only_affects_relative_dirs() {
        assert_eq!(resolve_output(Path::new("runs/a"), Some("/tmp/x")), PathBuf::from("/tmp/x/runs/a"));
        assert_eq!(resolve_output(Path::new("/abs"), Some("/tmp/x")), PathBuf::from("/abs"));
        assert_eq!(resolve_output(Path::new("runs/a"), None), PathBuf::from("runs/a"));
    }
}
