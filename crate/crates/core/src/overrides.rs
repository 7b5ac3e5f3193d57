//! Dotted `key = value` overrides on serializable configs.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Returns a copy of `target` with the dotted `key` (for example
/// `stage1.learning_rate`) set to `value`. The value is read as a TOML
/// literal, falling back to a plain string; integers are accepted where a
/// float is expected.
pub fn apply_override<T: Serialize + DeserializeOwned>(target: &T, key: &str, value: &str) -> Result<T, String> {
    let parsed = parse_literal(value);
    match set_value(target, key, parsed.clone()) {
        Ok(t) => Ok(t),
        Err(e) => match parsed {
            toml::Value::Integer(i) => set_value(target, key, toml::Value::Float(i as f64)).map_err(|_| e),
            _ => Err(e),
        },
    }
}

fn set_value<T: Serialize + DeserializeOwned>(target: &T, key: &str, value: toml::Value) -> Result<T, String> {
    let mut doc = toml::Value::try_from(target).map_err(|e| e.to_string())?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key {key:?}"));
    }
    let mut cursor = &mut doc;
    for (i, part) in parts.iter().enumerate() {
        let table = cursor.as_table_mut().ok_or_else(|| format!("{key}: not a table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            break;
        }
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    doc.try_into::<T>().map_err(|e| format!("{key}: {}", e.message()))
}

fn parse_literal(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}
