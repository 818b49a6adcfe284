//! Flat `key = value` configuration files mapped onto serde structs.
//!
//! Blank lines and `#` comments are ignored; `key value` (whitespace
//! separated) is accepted too. Keys absent from the file keep the defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub fn parse<T: Serialize + DeserializeOwned>(defaults: &T, text: &str, path: &Path) -> Result<T> {
    let mut map = serde_json::to_value(defaults)?;
    let obj = map
        .as_object_mut()
        .ok_or_else(|| Error::InvalidParameter("configuration type is not a struct".into()))?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            message: m,
        };
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(char::is_whitespace))
            .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let slot = obj.get_mut(key).ok_or_else(|| err(format!("unknown key {key:?}")))?;
        *slot = match slot {
            Value::String(_) => Value::String(value.trim_matches('"').to_string()),
            _ => serde_json::from_str(value).map_err(|_| err(format!("bad value {value:?} for {key}")))?,
        };
    }
    serde_json::from_value(map).map_err(|e| Error::Parse {
        path: PathBuf::from(path),
        line: 0,
        message: e.to_string(),
    })
}

pub fn load<T: Serialize + DeserializeOwned>(defaults: &T, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse(defaults, &text, path)
}

pub fn to_text<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("configuration serializes");
    let mut out = String::new();
    if let Some(obj) = value.as_object() {
        for (k, v) in obj {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    out
}
