//! Layered configuration: built-in defaults, then an optional JSON file,
//! then flat `--key value` flags.

use anyhow::{bail, Context, Result};
use edgedis::model::TrainConfig;
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "EDGEDIS_SEED";

/// Parses `--key value` pairs. Values are read as JSON when they parse,
/// so `--lr 0.01` is a number and `--backend gcn` a string.
pub fn parse_overrides(args: &[String]) -> Result<Map<String, Value>> {
    let mut out = Map::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected a --key flag, found {flag:?}");
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => (
                key,
                it.next().with_context(|| format!("--{key} needs a value"))?.clone(),
            ),
        };
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.insert(key.replace('-', "_"), value);
    }
    Ok(out)
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Merges the layers into a validated configuration. `EDGEDIS_SEED` stands
/// in for the built-in seed only.
pub fn resolve(file: Option<&Value>, overrides: &Map<String, Value>) -> Result<TrainConfig> {
    let mut merged = serde_json::to_value(TrainConfig::default())?;
    let obj = merged.as_object_mut().expect("config serialises to an object");
    if let Some(seed) = seed_from_env()? {
        obj.insert("seed".into(), seed.into());
    }
    if let Some(file) = file {
        let Value::Object(file) = file else {
            bail!("configuration file must hold a JSON object");
        };
        obj.extend(file.clone());
    }
    obj.extend(overrides.clone());
    let cfg: TrainConfig = serde_json::from_value(merged).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_json(path: &std::path::Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
