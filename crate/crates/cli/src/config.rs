//! Layered run configuration: serialized defaults, then an optional TOML file,
//! then command-line overrides. Unknown keys are rejected when the merged
//! table is deserialized into the (deny-unknown-fields) config struct.

use crate::CliError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::Path;
use toml::{Table, Value};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Overwrites `base` with `over`, recursing into nested tables.
pub fn merge(base: &mut Table, over: Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_path(table: &mut Table, dotted: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in {dotted:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("{dotted}: {p} is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads a `--set` value as a TOML literal, falling back to a plain string.
pub fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Parses `key=value` override strings.
pub fn parse_set(items: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    items
        .iter()
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {item:?}")))?;
            Ok((k.trim().to_string(), parse_value(v.trim())))
        })
        .collect()
}

pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    overrides: Vec<(String, Value)>,
) -> Result<T, CliError> {
    let mut table = Table::try_from(T::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let over: Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    for (key, value) in overrides {
        set_path(&mut table, &key, value)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
}

/// Writes the resolved configuration into the run's output directory.
pub fn write_resolved<T: Serialize>(dir: &Path, config: &T) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let text = toml::to_string_pretty(config).map_err(|e| CliError::Config(e.to_string()))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
