//! Configuration files: JSON, or plain `key = value` lines with dotted keys for nesting.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Loads a configuration. Files whose first non-blank character is `{` are JSON; anything
/// else is parsed as `key = value` lines (`#` starts a comment, `adapter.rank = 4` sets a
/// nested field). Values are read as JSON literals when they parse, strings otherwise.
pub fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config<C: DeserializeOwned>(text: &str) -> Result<C> {
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text)?
    } else {
        parse_key_values(text)?
    };
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// Converts `key = value` lines into a JSON object.
pub fn parse_key_values(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: &str| Error::Ingestion {
            line: lineno + 1,
            message: message.to_string(),
        };
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(bad("empty key segment"));
        }
        let value = value.trim();
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));

        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("key has at least one segment");
        let mut node = &mut root;
        for part in parts {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| bad(&format!("`{part}` is both a value and a table")))?;
        }
        if node.insert(leaf.to_string(), parsed).is_some() {
            return Err(bad(&format!("duplicate key `{key}`")));
        }
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    #[test]
    fn key_value_matches_json() {
        let kv = "# stage settings\nstage = da\nepochs = 2\npeak_lr = 0.001\nadapter.rank = 2\nadapter.alpha = 4\nadapter.shared_experts = 2\nadapter.experts = 4\nadapter.top_k = 2\n";
        let a: TrainConfig = parse_config(kv).unwrap();
        let js = r#"{"stage":"da","epochs":2,"peak_lr":0.001,"adapter":{"rank":2,"alpha":4.0,"shared_experts":2,"experts":4,"top_k":2}}"#;
        let b: TrainConfig = parse_config(js).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.adapter.rank, 2);
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(matches!(parse_config::<TrainConfig>("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_key_values("novalue").is_err());
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("a = 1\na.b = 2").is_err());
        assert!(parse_key_values("a..b = 1").is_err());
    }
}
