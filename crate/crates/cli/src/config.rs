//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! client = stub-merge
//! aspects = clarity, lighting, color
//! ```
//!
//! Keys use snake_case and mirror the long flag names. Resolution order is
//! command-line flag, then config file, then the built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Keys that would hold credentials; these are only read from the
/// environment.
const FORBIDDEN: [&str; 4] = ["api_key", "key", "token", "secret"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected `key = value`", i + 1);
            };
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                bail!("config line {}: empty key", i + 1);
            }
            if FORBIDDEN.iter().any(|f| key == *f || key.ends_with(&format!("_{f}"))) {
                bail!("config line {}: `{key}` looks like a credential; set it through the environment instead", i + 1);
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("config line {}: duplicate key `{key}`", i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Flag,
    Config,
    Default,
}

/// Resolves settings across the three layers and remembers what it
/// resolved, for the dry-run plan and the run manifest.
#[derive(Debug, Default)]
pub struct Settings {
    config: ConfigFile,
    resolved: BTreeMap<String, (String, Origin)>,
}

impl Settings {
    pub fn new(config: ConfigFile) -> Self {
        Self {
            config,
            resolved: BTreeMap::new(),
        }
    }

    fn config_value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.config.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{raw}`: {e}")),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let (value, origin) = match (flag, self.config_value(key)?) {
            (Some(v), _) => (v, Origin::Flag),
            (None, Some(v)) => (v, Origin::Config),
            (None, None) => (default, Origin::Default),
        };
        self.resolved.insert(key.to_string(), (value.to_string(), origin));
        Ok(value)
    }

    /// Like [`get`](Self::get) without a default.
    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let found = match (flag, self.config_value(key)?) {
            (Some(v), _) => Some((v, Origin::Flag)),
            (None, Some(v)) => Some((v, Origin::Config)),
            (None, None) => None,
        };
        Ok(found.map(|(v, origin)| {
            self.resolved.insert(key.to_string(), (v.to_string(), origin));
            v
        }))
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.get_opt(key, flag)?
            .ok_or_else(|| anyhow::anyhow!("missing required setting `{key}` (flag --{} or config key)", key.replace('_', "-")))
    }

    pub fn resolved(&self) -> BTreeMap<String, serde_json::Value> {
        self.resolved
            .iter()
            .map(|(k, (v, o))| (k.clone(), serde_json::json!({"value": v, "from": o})))
            .collect()
    }

    pub fn resolved_values(&self) -> BTreeMap<&str, &str> {
        self.resolved.iter().map(|(k, (v, _))| (k.as_str(), v.as_str())).collect()
    }
}
