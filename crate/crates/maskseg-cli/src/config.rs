//! Flat `key = value` config files. Flags win over config values; config
//! values win over defaults.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use maskseg::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::config(format!(
                        "{}:{}: expected 'key = value'",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    /// Resolve one option: explicit flag > config file > default.
    pub fn get<T: FromStr + Clone>(&self, key: &str, flag: &Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::config(format!("config key '{}': bad value '{}'", key, raw))),
            None => Ok(default),
        }
    }
}
