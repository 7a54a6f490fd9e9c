//! Config files, dotted overrides and resolved snapshots.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Reads a JSON object from `path`, or `{}` when no file is given.
pub fn read_value(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !v.is_object() {
        bail!("{}: config must be a JSON object", path.display());
    }
    Ok(v)
}

/// Parses `a.b.c=value`. The value is taken as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s.split_once('=').with_context(|| format!("override {s:?} is not key=value"))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override key {key:?} has an empty segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Sets `path` inside `root`, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            other => bail!("cannot set {} below a non-object value {other}", path[..i].join(".")),
        };
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        cur = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
    }
    Ok(())
}

/// File config with the overrides applied in order, so the last one wins.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, overrides: &[(Vec<String>, Value)]) -> Result<T> {
    let mut v = read_value(file)?;
    for (path, value) in overrides {
        set_path(&mut v, path, value.clone())?;
    }
    serde_json::from_value(v).context("invalid configuration")
}

/// Writes the fully resolved config next to the outputs.
pub fn write_snapshot<T: Serialize>(cfg: &T, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("config.json");
    let mut bytes = serde_json::to_vec_pretty(cfg)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_last_wins() {
        let mut v = serde_json::json!({"train": {"lr": 0.1}});
        for s in ["train.lr=0.01", "train.loss.name=jaccard", "train.lr=0.001", "seed=4"] {
            let (p, x) = parse_override(s).unwrap();
            set_path(&mut v, &p, x).unwrap();
        }
        assert_eq!(v, serde_json::json!({"train": {"lr": 0.001, "loss": {"name": "jaccard"}}, "seed": 4}));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
        let (p, x) = parse_override("a=1").unwrap();
        let mut scalar = serde_json::json!({"a": {"b": 1}});
        assert!(set_path(&mut scalar, &["a".into(), "b".into(), "c".into()], x.clone()).is_err());
        set_path(&mut scalar, &p, x).unwrap();
        assert_eq!(scalar["a"], 1);
    }
}
