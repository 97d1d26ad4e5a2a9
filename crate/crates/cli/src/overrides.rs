//! `--param key=value` overrides applied through the serialized schema.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Parses `key=value`; the value is read as JSON when possible, else as a string.
pub fn parse_param(raw: &str) -> Result<(String, Value), String> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("--param expects key=value, got `{raw}`"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("--param has an empty key in `{raw}`"));
    }
    let value = value.trim();
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

/// Replaces the existing field at dotted `key` in `target`.
///
/// Only existing keys may be set, so a typo is an error rather than a
/// silently ignored field.
pub fn apply<T: Serialize + DeserializeOwned>(
    target: &T,
    params: &[(String, Value)],
) -> Result<T, String> {
    let mut doc = serde_json::to_value(target).map_err(|e| e.to_string())?;
    for (key, value) in params {
        let mut node = &mut doc;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
                _ => None,
            }
            .ok_or_else(|| format!("unknown parameter `{key}`"))?;
        }
        *node = value.clone();
    }
    serde_json::from_value(doc).map_err(|e| format!("bad parameter value: {e}"))
}
