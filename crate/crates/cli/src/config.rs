//! TOML config files plus `--section.key value` overrides.
//!
//! Every key must already exist in the serialized defaults, so a typo is a
//! usage error instead of a silently ignored setting.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::UsageError;

/// Splits `--a.b value` and `--a.b=value` pairs (dotted keys only) out of
/// the argument list. Returns the remaining arguments and the overrides.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), UsageError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        if let Some((k, v)) = key.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| UsageError(format!("override --{key} needs a value")))?;
            overrides.push((key.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Integers are accepted where the default is a float.
fn coerce(default: &Value, v: Value) -> Value {
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

fn merge(base: &mut Table, incoming: Table, path: &str) -> Result<(), UsageError> {
    for (k, v) in incoming {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        let Some(slot) = base.get_mut(&k) else {
            return Err(UsageError(format!("unknown config key `{full}`")));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(t)) => merge(b, t, &full)?,
            (Value::Table(_), _) => return Err(UsageError(format!("config key `{full}` is a section"))),
            (slot, v) => *slot = coerce(slot, v),
        }
    }
    Ok(())
}

fn set(base: &mut Table, key: &str, raw: &str) -> Result<(), UsageError> {
    set_path(base, key, key, raw)
}

fn set_path(table: &mut Table, rest: &str, key: &str, raw: &str) -> Result<(), UsageError> {
    let unknown = || UsageError(format!("unknown config key `{key}`"));
    let (head, tail) = match rest.split_once('.') {
        Some((h, t)) => (h, Some(t)),
        None => (rest, None),
    };
    match (table.get_mut(head).ok_or_else(unknown)?, tail) {
        (Value::Table(t), Some(tail)) => set_path(t, tail, key, raw),
        (Value::Table(_), None) => Err(UsageError(format!("config key `{key}` is a section"))),
        (_, Some(_)) => Err(unknown()),
        (slot, None) => {
            *slot = coerce(slot, parse_value(raw));
            Ok(())
        }
    }
}

/// Defaults, then the optional file, then the overrides. Returns the typed
/// config and its fully resolved table.
pub fn resolve<C: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> anyhow::Result<(C, Table)> {
    let mut table = Table::try_from(C::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let incoming: Table = text.parse().map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        merge(&mut table, incoming, "")?;
    }
    for (k, v) in overrides {
        set(&mut table, k, v)?;
    }
    let config: C = Value::Table(table.clone()).try_into().map_err(|e| UsageError(format!("invalid config: {e}")))?;
    Ok((config, table))
}
