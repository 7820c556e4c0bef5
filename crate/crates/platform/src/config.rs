//! Service configuration, read from TOML.

use std::path::{Path, PathBuf};

use ienv_core::jobs::Backend;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub server: ServerConfig,
    pub storage: StorageConfig,
    pub auth: AuthConfig,
    pub compute: ComputeConfig,
    pub notify: NotifyConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { bind: "127.0.0.1:8080".into() }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    /// State file; in-memory only when absent.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthConfig {
    pub session_ttl_hours: u32,
    pub allow_public_read: bool,
    /// Argon2id memory cost.
    pub kdf_memory_kib: u32,
    pub kdf_iterations: u32,
    pub bootstrap_admin: Option<BootstrapAdmin>,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            session_ttl_hours: 8,
            allow_public_read: false,
            kdf_memory_kib: 19 * 1024,
            kdf_iterations: 2,
            bootstrap_admin: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapAdmin {
    pub name: String,
    pub secret: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeConfig {
    pub backends: Vec<Backend>,
}

impl Default for ComputeConfig {
    fn default() -> Self {
        ComputeConfig { backends: vec![Backend { name: "local".into(), capacity: 2, kind: Default::default() }] }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NotifyConfig {
    /// First webhook retry delay; later retries double it.
    pub webhook_backoff_ms: u64,
    pub webhook_retries: u32,
}

impl Default for NotifyConfig {
    fn default() -> Self {
        NotifyConfig { webhook_backoff_ms: 1000, webhook_retries: 3 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.auth.session_ttl_hours == 0 {
            return Err(Error::ConfigInvalid("auth.session_ttl_hours must be >= 1".into()));
        }
        if self.auth.kdf_memory_kib < 8 || self.auth.kdf_iterations == 0 {
            return Err(Error::ConfigInvalid("auth KDF parameters too small".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for b in &self.compute.backends {
            if b.capacity == 0 {
                return Err(Error::ConfigInvalid(format!("backend `{}` needs capacity >= 1", b.name)));
            }
            if !names.insert(&b.name) {
                return Err(Error::ConfigInvalid(format!("backend `{}` listed twice", b.name)));
            }
        }
        Ok(())
    }

    /// Small KDF cost, no default backends; for tests and examples.
    pub fn for_tests() -> Self {
        let mut cfg = Config::default();
        cfg.auth.kdf_memory_kib = 64;
        cfg.auth.kdf_iterations = 1;
        cfg.compute.backends.clear();
        cfg.notify.webhook_backoff_ms = 10;
        cfg
    }
}
