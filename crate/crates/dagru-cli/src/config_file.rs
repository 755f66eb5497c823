//! `key = value` config files with `#` comments. Flags given on the command
//! line take precedence over file values, which take precedence over the
//! built-in defaults.

use dagru::{Error, Result};
use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut values = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::data(format!(
                    "{}:{}: expected 'key = value', got {raw:?}",
                    path.display(),
                    n + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("config key {key} has unparseable value {raw:?}"))
            }),
        }
    }

    /// CLI flag beats config file beats default.
    pub fn resolve<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match cli {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }
}
