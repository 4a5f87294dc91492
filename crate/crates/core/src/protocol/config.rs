//! INI configuration with `PINGPONG_*` environment overrides.
//!
//! ```ini
//! [params]
//! round_ms = 500
//!
//! [ping]
//! listen = 127.0.0.1:7100
//! secret_key = keys/ping.sk
//! public_key = keys/ping.pk
//! peers = 127.0.0.1:7101, 127.0.0.1:7102
//!
//! [deployment]
//! entries = 2
//! backends = 4
//! ```
//!
//! Params keys are overridden by `PINGPONG_<KEY>` (e.g. `PINGPONG_ROUND_MS`),
//! service keys by `PINGPONG_<SERVICE>_<KEY>` (e.g. `PINGPONG_PONG_LISTEN`).

use std::path::{Path, PathBuf};

use ini::Ini;
use thiserror::Error;

use super::params::{Params, ParamsError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("[{section}] {key}: {reason}")]
    Value {
        section: String,
        key: String,
        reason: String,
    },
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    /// Whole service on one node.
    Single,
    /// Client-facing node that splits batches across backends.
    Entry,
    /// Aggregation (Ping) or storage (Pong) node behind the entries.
    Backend,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ServiceConfig {
    pub listen: Option<String>,
    pub secret_key: Option<PathBuf>,
    pub public_key: Option<PathBuf>,
    pub peers: Vec<String>,
}

impl ServiceConfig {
    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "listen" => self.listen = Some(value.trim().to_string()),
            "secret_key" => self.secret_key = Some(PathBuf::from(value.trim())),
            "public_key" => self.public_key = Some(PathBuf::from(value.trim())),
            "peers" => {
                self.peers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            _ => {
                return Err(ConfigError::Value {
                    section: section.into(),
                    key: key.into(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub params: Params,
    pub ping: ServiceConfig,
    pub pong: ServiceConfig,
    pub entries: usize,
    pub backends: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            params: Params::default(),
            ping: ServiceConfig::default(),
            pong: ServiceConfig::default(),
            entries: 2,
            backends: 1,
        }
    }
}

impl Config {
    /// Defaults, then the file (if any), then process environment.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                Config::parse_ini(&text)?
            }
            None => Config::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.params.validate()?;
        Ok(cfg)
    }

    pub fn parse_ini(text: &str) -> Result<Config, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Read {
            path: "<config>".into(),
            reason: e.to_string(),
        })?;
        let mut cfg = Config::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("params");
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        match section {
            "params" => self.params.set(key, value)?,
            "ping" => self.ping.set(section, key, value)?,
            "pong" => self.pong.set(section, key, value)?,
            "deployment" => {
                let n: usize = value.trim().parse().map_err(|_| ConfigError::Value {
                    section: section.into(),
                    key: key.into(),
                    reason: format!("cannot parse {value:?}"),
                })?;
                let bad = |reason: &str| ConfigError::Value {
                    section: section.into(),
                    key: key.into(),
                    reason: reason.into(),
                };
                if n == 0 {
                    return Err(bad("must be positive"));
                }
                match key {
                    "entries" => self.entries = n,
                    "backends" => self.backends = n,
                    _ => return Err(bad("unknown key")),
                }
            }
            _ => {
                return Err(ConfigError::Value {
                    section: section.into(),
                    key: key.into(),
                    reason: "unknown section".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies `PINGPONG_*` overrides from the given variables.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(
        &mut self,
        vars: I,
    ) -> Result<(), ConfigError> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("PINGPONG_") else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            if Params::KEYS.contains(&rest.as_str()) {
                self.set("params", &rest, &value)?;
            } else if let Some(key) = rest.strip_prefix("ping_") {
                self.set("ping", key, &value)?;
            } else if let Some(key) = rest.strip_prefix("pong_") {
                self.set("pong", key, &value)?;
            } else if rest == "entries" || rest == "backends" {
                self.set("deployment", &rest, &value)?;
            }
            // other PINGPONG_* names (dataset paths etc.) belong to other tools
        }
        Ok(())
    }
}
