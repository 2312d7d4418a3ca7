//! Line-based `key = value` configuration files with `#` comments.
//! Command-line flags override file values; the resolved set is echoed
//! into checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("config key {key}: `{v}` is not a number")))
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("config key {key}: `{v}` is not an integer")))
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Format(format!("config key {key}: `{v}` is not an integer")))
            })
            .transpose()
    }

    /// Canonical rendering, sorted by key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
