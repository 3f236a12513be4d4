//! Config loading with line diagnostics.
//!
//! Files ending in `.json` are read as JSON, anything else as TOML. A JSON
//! file carrying `subcommand` and `config` keys is taken to be a manifest;
//! its `config` section is used and its seed becomes the default seed.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::CliError;

pub struct Loaded<T> {
    pub config: T,
    /// Seed recorded in a manifest used as the config, if any.
    pub manifest_seed: Option<u64>,
}

/// Key named in an "unknown field" or "missing field" message.
pub fn named_key(message: &str) -> Option<String> {
    ["unknown field `", "missing field `", "unknown variant `"].iter().find_map(|pat| {
        let start = message.find(pat)? + pat.len();
        let len = message[start..].find('`')?;
        Some(message[start..start + len].to_string())
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

fn config_error(path: &Path, message: String, pos: Option<(usize, usize)>) -> CliError {
    CliError::Config {
        path: path.display().to_string(),
        key: named_key(&message),
        message,
        line: pos.map(|p| p.0),
        column: pos.map(|p| p.1),
    }
}

pub fn parse<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Loaded<T>, CliError> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if !is_json {
        return toml::from_str(text)
            .map(|config| Loaded { config, manifest_seed: None })
            .map_err(|e| {
                let pos = e.span().map(|s| line_col(text, s.start));
                config_error(path, e.message().to_string(), pos)
            });
    }
    let json_err = |e: serde_json::Error| {
        let pos = (e.line() > 0).then(|| (e.line(), e.column()));
        config_error(path, e.to_string(), pos)
    };
    let value: Value = serde_json::from_str(text).map_err(json_err)?;
    match value {
        Value::Object(mut map) if map.contains_key("subcommand") && map.contains_key("config") => {
            let manifest_seed = map.get("seed").and_then(Value::as_u64);
            let inner = map.remove("config").unwrap_or(Value::Null);
            // positions refer to the embedded section, so only the message is kept
            let config = serde_json::from_value(inner).map_err(|e| config_error(path, e.to_string(), None))?;
            Ok(Loaded { config, manifest_seed })
        }
        _ => {
            let config = serde_json::from_str(text).map_err(json_err)?;
            Ok(Loaded { config, manifest_seed: None })
        }
    }
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<Loaded<T>, CliError> {
    match path {
        None => Ok(Loaded { config: T::default(), manifest_seed: None }),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config {
                path: p.display().to_string(),
                message: e.to_string(),
                key: None,
                line: None,
                column: None,
            })?;
            parse(p, &text)
        }
    }
}
