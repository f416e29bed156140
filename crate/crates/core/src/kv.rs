//! Flat `key = value` text, one pair per line. `#` starts a comment.

use crate::error::{Error, Result};

/// Parses `text` into ordered pairs. Duplicate keys are rejected.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::config(format!("line {}", lineno + 1), "empty key"));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::config(key, "duplicate key"));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn render<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{} = {}\n", k.as_ref(), v.as_ref()))
        .collect()
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("`{value}` is not a boolean"))),
    }
}
