//! Configuration resolution: preset, then `DTMOE_SEED`, then the config
//! file, then `--set` overrides, each layer replacing keys of the previous.

use std::path::Path;

use serde::Deserialize;
use toml::{Table, Value};

use driftmoe::model::ModelConfig;

use crate::failure::{CliResult, Failure};

pub const SEED_ENV: &str = "DTMOE_SEED";

/// Seed from the environment, if set.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn preset(spec: &str) -> CliResult<ModelConfig> {
    let (name, horizon) = spec
        .split_once(':')
        .ok_or_else(|| Failure::config(format!("preset {spec:?} should look like etth1:96")))?;
    let horizon: usize = horizon
        .parse()
        .map_err(|_| Failure::config(format!("preset horizon {horizon:?} is not a number")))?;
    ModelConfig::preset(name, horizon).map_err(|e| Failure::config(e.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string (so `router=stateless` works without quotes).
fn parse_set(entry: &str) -> CliResult<Table> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set {entry:?} should look like key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Failure::config(format!("--set {entry:?} has an empty key")));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut out = Table::new();
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = &mut out;
    for p in parts {
        cur = match cur.entry(p).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => unreachable!("fresh table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(out)
}

pub fn resolve(
    preset_spec: Option<&str>,
    file: Option<&Path>,
    sets: &[String],
    no_adapt: bool,
) -> CliResult<ModelConfig> {
    let mut base = match preset_spec {
        Some(p) => preset(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        base.seed = seed;
    }
    let mut table = Table::try_from(&base).map_err(|e| Failure::config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let over: Table = toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    for s in sets {
        merge(&mut table, parse_set(s)?);
    }
    let mut cfg = ModelConfig::deserialize(Value::Table(table))
        .map_err(|e| Failure::config(format!("invalid configuration: {e}")))?;
    if no_adapt {
        cfg.train.adapt = false;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_keys() {
        let cfg = resolve(
            None,
            None,
            &["train.lr=0.5".into(), "router=stateless".into(), "top_k=2".into()],
            false,
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.top_k, 2);
        assert_eq!(cfg.router, driftmoe::router::RouterKind::Stateless);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = resolve(None, None, &["train.learning_rate=0.5".into()], false).unwrap_err();
        assert_eq!(err.code, crate::failure::CONFIG);
        assert!(err.message.contains("learning_rate"), "{}", err.message);
    }

    #[test]
    fn preset_then_override() {
        let cfg = resolve(Some("weather:336"), None, &["stride=24".into()], true).unwrap();
        assert_eq!(cfg.patch_len, 96);
        assert_eq!(cfg.stride, 24);
        assert_eq!(cfg.train.lr, 6e-4);
        assert!(!cfg.train.adapt);
    }
}
